import json

import numpy as np
import pytest

from baim.data import ItemCatalog
from baim.embedding import (HiddenStateDump, apply_pca, build_table, decode_dump, encode_dump,
                            fit_pca, holistic_pool, layer_pool, load_table, read_dumps,
                            save_table, sidecar_path, stage_vectors, synth_dumps,
                            temporal_aggregate, write_dumps)
from baim.exceptions import ParseError, ValidationError

from oracles import holistic_loop, pca_eig, pipeline_loop

FOUR_SINGLE = ((0, 0), (1, 1), (2, 2), (3, 3))


def _dump(tensor, spans=FOUR_SINGLE, item=0):
    return HiddenStateDump(item, np.asarray(tensor, dtype=np.float32), spans)


def random_dump(rng, item=0, L=3, T=6, D=4):
    tensor = rng.standard_normal((L, T, D)).astype(np.float32)
    spans = []
    for _ in range(4):
        s = int(rng.integers(0, T))
        spans.append((s, int(rng.integers(s, T))))
    return HiddenStateDump(item, tensor, tuple(spans))


# --- temporal aggregation -----------------------------------------------------------

def test_span_mean_hand_example():
    tensor = np.zeros((1, 4, 2))
    tensor[0, 1], tensor[0, 2] = (1, 3), (3, 5)
    d = _dump(tensor, ((1, 2), (0, 0), (0, 0), (0, 0)))
    np.testing.assert_array_equal(temporal_aggregate(d, 0), [[2.0, 4.0]])


def test_single_token_span_is_identity():
    rng = np.random.default_rng(0)
    d = random_dump(rng)
    d = HiddenStateDump(0, d.tensor, ((2, 2), (0, 5), (1, 3), (4, 4)))
    np.testing.assert_array_equal(temporal_aggregate(d, 0), d.tensor[:, 2, :].astype(np.float64))


def test_constant_tokens_give_constant():
    d = _dump(np.full((3, 6, 4), 1.25), ((0, 5), (1, 2), (3, 3), (0, 1)))
    for p in range(4):
        np.testing.assert_array_equal(temporal_aggregate(d, p), np.full((3, 4), 1.25))


def test_temporal_aggregate_permutation_invariant():
    rng = np.random.default_rng(4)
    d = random_dump(rng, T=8)
    d = HiddenStateDump(0, d.tensor, ((1, 6), (0, 0), (0, 7), (3, 4)))
    perm = np.arange(8)
    perm[1:7] = rng.permutation(np.arange(1, 7))
    shuffled = HiddenStateDump(0, d.tensor[:, perm, :], d.spans)
    np.testing.assert_allclose(temporal_aggregate(shuffled, 0), temporal_aggregate(d, 0), atol=1e-12)


def test_invalid_span_rejected():
    with pytest.raises(ValidationError):
        _dump(np.zeros((1, 4, 2)), ((2, 1), (0, 0), (0, 0), (0, 0)))
    with pytest.raises(ValidationError):
        _dump(np.zeros((1, 4, 2)), ((0, 4), (0, 0), (0, 0), (0, 0)))
    with pytest.raises(ValidationError):
        temporal_aggregate(_dump(np.zeros((1, 4, 2))), 4)


# --- layer pooling -----------------------------------------------------------------

def test_global_pool_hand_mean():
    np.testing.assert_array_equal(layer_pool([[0, 0], [2, 2]], "global"), [1.0, 1.0])


def test_single_layer_strategies_agree():
    v = np.array([[0.3, -1.2, 4.0]])
    np.testing.assert_array_equal(layer_pool(v, "global"), layer_pool(v, "final_layer"))


def test_identical_layers_strategies_agree():
    v = np.tile([0.1, 0.7], (5, 1))
    np.testing.assert_allclose(layer_pool(v, "global"), layer_pool(v, "final_layer"), atol=1e-15)


def test_global_pool_layer_permutation_invariant():
    v = np.random.default_rng(2).standard_normal((6, 5))
    np.testing.assert_allclose(layer_pool(v[::-1]), layer_pool(v), atol=1e-14)


def test_unknown_pool_strategy():
    with pytest.raises(ValidationError):
        layer_pool([[1.0]], "median")


# --- holistic pooling -----------------------------------------------------------------

def test_holistic_constant():
    d = _dump(np.full((2, 5, 3), -0.5), ((0, 1), (2, 2), (3, 4), (1, 3)))
    np.testing.assert_array_equal(holistic_pool(d), np.full(3, -0.5))


def test_holistic_equal_span_means():
    # each 2-token span averages to m at every layer
    m = np.array([1.0, -2.0])
    tensor = np.zeros((2, 8, 2))
    for s in range(0, 8, 2):
        delta = np.random.default_rng(s).standard_normal(2)
        tensor[:, s], tensor[:, s + 1] = m + delta, m - delta
    d = _dump(tensor, ((0, 1), (2, 3), (4, 5), (6, 7)))
    np.testing.assert_allclose(holistic_pool(d), m, atol=1e-6)


def test_holistic_matches_double_loop():
    rng = np.random.default_rng(7)
    for _ in range(10):
        d = random_dump(rng)
        np.testing.assert_allclose(holistic_pool(d), holistic_loop(d.tensor, d.spans), atol=1e-12)


# --- PCA ---------------------------------------------------------------------------

def test_pca_axis_aligned():
    X = np.array([[1, 0], [-1, 0], [2, 0], [-2, 0]], dtype=float)
    model = fit_pca(X, 1)
    np.testing.assert_allclose(np.abs(model.components[0]), [1, 0], atol=1e-12)
    proj = apply_pca(model, X)[:, 0]
    np.testing.assert_allclose(np.abs(proj), [1, 1, 2, 2], atol=1e-12)
    assert np.allclose(proj, [1, -1, 2, -2]) or np.allclose(proj, [-1, 1, -2, 2])


def test_pca_full_rank_reconstructs():
    X = np.random.default_rng(0).standard_normal((12, 5))
    model = fit_pca(X, 5)
    recon = apply_pca(model, X) @ model.components + model.mean
    assert np.abs(recon - X).max() < 1e-9


def test_pca_variance_matches_eigensolver():
    X = np.random.default_rng(1).standard_normal((20, 8))
    model = fit_pca(X, 8)
    _, comps, eig = pca_eig(X, 8)
    np.testing.assert_allclose(model.explained_variance, eig, atol=1e-8)
    np.testing.assert_allclose(model.components, comps, atol=1e-8)


def test_pca_components_orthonormal_and_sorted():
    X = np.random.default_rng(3).standard_normal((30, 10)) @ np.diag(np.arange(1, 11))
    model = fit_pca(X, 6)
    C = model.components
    assert np.abs(C @ C.T - np.eye(6)).max() < 1e-6
    assert np.all(np.diff(model.explained_variance) <= 0)
    for c in C:
        assert c[np.argmax(np.abs(c))] > 0


def test_pca_projected_variance_bounded():
    X = np.random.default_rng(5).standard_normal((15, 9))
    model = fit_pca(X, 4)
    total = X.var(axis=0, ddof=1).sum()
    assert apply_pca(model, X).var(axis=0, ddof=1).sum() <= total * (1 + 1e-8)


def test_pca_rank_limited_and_padded():
    X = np.random.default_rng(6).standard_normal((3, 10))
    model = fit_pca(X, 8)
    assert model.n_components == 2
    out = apply_pca(model, X)
    assert out.shape == (3, 8)
    assert np.all(out[:, 2:] == 0)


def test_pca_zero_variance_flagged():
    X = np.ones((5, 3))
    model = fit_pca(X, 2)
    assert model.zero_variance.all()
    assert np.all(model.explained_variance == 0)


def test_pca_needs_two_rows():
    with pytest.raises(ValidationError):
        fit_pca(np.ones((1, 3)), 2)


def test_apply_pca_mean_maps_to_zero():
    X = np.random.default_rng(8).standard_normal((10, 4))
    model = fit_pca(X, 3)
    np.testing.assert_allclose(apply_pca(model, model.mean), 0, atol=1e-15)


def test_apply_pca_refit_consistency():
    X = np.random.default_rng(9).standard_normal((10, 4))
    model = fit_pca(X, 3)
    stored = (X - X.mean(0)) @ model.components.T
    np.testing.assert_allclose(apply_pca(model, X), stored, atol=1e-10)


def test_apply_pca_orthogonal_complement():
    model = fit_pca(np.array([[1.0, 0], [-1, 0], [3, 0], [-3, 0]]), 1)
    assert abs(apply_pca(model, [0.0, 5.0])[0]) < 1e-12


def test_apply_pca_width_mismatch():
    model = fit_pca(np.random.default_rng(0).standard_normal((5, 3)), 2)
    with pytest.raises(ValidationError):
        apply_pca(model, np.zeros(4))


# --- build_table -------------------------------------------------------------------

def test_table_axis_aligned_equals_centered_means():
    # L=1, single-token spans, so the pooled stage vectors are the tokens themselves;
    # variance along e1 dominates e2, so the shared basis is the identity.
    offset = np.array([5.0, -2.0])
    stages = np.array([[[3, 0], [-3, 0], [0, 1], [0, -1]],
                       [[2, 0], [-2, 0], [0, 0.5], [0, -0.5]]], dtype=float)
    dumps = [_dump((stages[i] + offset)[None], item=i) for i in range(2)]
    table = build_table(dumps, 2, "global")
    np.testing.assert_allclose(table.matrix, stages, atol=1e-6)


def test_table_final_layer_equals_global_on_single_layer():
    rng = np.random.default_rng(10)
    dumps = [random_dump(rng, item=i, L=1) for i in range(6)]
    a = build_table(dumps, 5, "global").matrix
    b = build_table(dumps, 5, "final_layer").matrix
    assert a.tobytes() == b.tobytes()


def test_table_deterministic_and_shaped():
    rng = np.random.default_rng(11)
    dumps = [random_dump(rng, item=i) for i in range(5)]
    a, b = build_table(dumps, 7, "global"), build_table(dumps, 7, "global")
    assert a.matrix.shape == (5, 4, 7)
    assert a.matrix.tobytes() == b.matrix.tobytes()


def test_table_matches_scalar_loop_pipeline():
    rng = np.random.default_rng(12)
    dumps = [random_dump(rng, item=i) for i in range(6)]
    for strategy in ("global", "final_layer", "holistic"):
        got = build_table(dumps, 3, strategy).matrix
        want = pipeline_loop([(d.tensor, d.spans) for d in dumps], 3, strategy)
        np.testing.assert_allclose(got, want, atol=1e-10)


def test_holistic_table_replicates_stage_slots():
    rng = np.random.default_rng(13)
    table = build_table([random_dump(rng, item=i) for i in range(5)], 3, "holistic")
    for p in range(1, 4):
        np.testing.assert_array_equal(table.matrix[:, p], table.matrix[:, 0])


def test_table_missing_and_duplicate_items():
    rng = np.random.default_rng(14)
    dumps = [random_dump(rng, item=i) for i in (0, 2, 3)]
    with pytest.raises(ValidationError, match=r"\[1, 4\]"):
        build_table(dumps, 3, item_count=5)
    with pytest.raises(ValidationError, match="duplicate"):
        build_table(dumps + [random_dump(rng, item=2)], 3)


# --- synthetic dumps ---------------------------------------------------------------

def test_synth_dumps_deterministic_and_shaped():
    cat = ItemCatalog(5)
    a = synth_dumps(cat, 2, 9, 6, seed=1)
    b = synth_dumps(cat, 2, 9, 6, seed=1)
    for x, y in zip(a, b):
        assert x.shape == (2, 9, 6)
        assert x.tensor.tobytes() == y.tensor.tobytes() and x.spans == y.spans
        covered = sorted(t for s, e in x.spans for t in range(s, e + 1))
        assert covered == list(range(9))


def test_synth_dumps_zero_scale_exchangeable():
    dumps = synth_dumps(ItemCatalog(100), 2, 12, 8, seed=3, profile_scale=0.0)
    per_stage = np.stack([stage_vectors(d) for d in dumps])       # (100, 4, 8)
    means = per_stage.mean(axis=0)
    se = per_stage.std(axis=0, ddof=1) / np.sqrt(100)
    for p in range(1, 4):
        diff = np.abs(means[p] - means[0])
        assert np.all(diff < 3 * np.sqrt(se[p] ** 2 + se[0] ** 2))


def _stage_gap_r2(scale):
    """R^2 of regressing (stage p - stage 0) vectors on the two profile weights."""
    rng = np.random.default_rng(0)
    profiles = rng.uniform(size=(200, 4))
    dumps = synth_dumps(ItemCatalog(200), 2, 16, 8, seed=4, profiles=profiles,
                        profile_scale=scale)
    pooled = np.stack([stage_vectors(d) for d in dumps])
    scores = []
    for p in range(1, 4):
        gap = pooled[:, p] - pooled[:, 0]               # item signature cancels
        A = np.column_stack([profiles[:, p], profiles[:, 0], np.ones(200)])
        coef, *_ = np.linalg.lstsq(A, gap, rcond=None)
        resid = gap - A @ coef
        scores.append(1 - (resid ** 2).sum() / ((gap - gap.mean(0)) ** 2).sum())
    return min(scores)


def test_synth_dumps_carry_stage_signal():
    assert _stage_gap_r2(1.0) > 0.3
    assert _stage_gap_r2(0.0) < 0.1


def test_synth_dumps_short_sequence():
    with pytest.raises(ValidationError):
        synth_dumps(ItemCatalog(2), 1, 3, 4, seed=0)


# --- files -------------------------------------------------------------------------

def test_dump_encode_decode_round_trip():
    d = random_dump(np.random.default_rng(0), item=17)
    back, end = decode_dump(encode_dump(d))
    assert end == len(encode_dump(d))
    assert back.item_id == 17 and back.spans == d.spans
    assert back.tensor.tobytes() == d.tensor.tobytes()


def test_dump_bad_magic_and_truncation():
    blob = bytearray(encode_dump(random_dump(np.random.default_rng(0))))
    with pytest.raises(ParseError):
        decode_dump(bytes(blob[:-4]))
    blob[0:8] = b"NOTADUMP"
    with pytest.raises(ParseError):
        decode_dump(bytes(blob))


def test_dump_container_and_index(tmp_path):
    rng = np.random.default_rng(1)
    dumps = [random_dump(rng, item=i) for i in range(4)]
    index = write_dumps(tmp_path / "d.bin", dumps)
    entries = [json.loads(line) for line in index.read_text().splitlines()]
    assert [e["item_id"] for e in entries] == [0, 1, 2, 3]
    back = read_dumps(index)
    assert all(a.tensor.tobytes() == b.tensor.tobytes() for a, b in zip(dumps, back))


def test_table_file_round_trip(tmp_path):
    rng = np.random.default_rng(2)
    table = build_table([random_dump(rng, item=i) for i in range(5)], 4, "final_layer")
    save_table(table, tmp_path / "t.bin", {"catalog_fingerprint": "abc"})
    side = json.loads(sidecar_path(tmp_path / "t.bin").read_text())
    assert side["strategy"] == "final_layer" and side["target_dim"] == 4
    assert len(side["pca"]["explained_variance"]) == table.pca.n_components
    back = load_table(tmp_path / "t.bin")
    np.testing.assert_array_equal(back.matrix, table.matrix.astype(np.float32))
    assert back.strategy == "final_layer" and back.info["catalog_fingerprint"] == "abc"


def test_table_file_truncated(tmp_path):
    rng = np.random.default_rng(3)
    table = build_table([random_dump(rng, item=i) for i in range(3)], 2)
    save_table(table, tmp_path / "t.bin")
    raw = (tmp_path / "t.bin").read_bytes()
    (tmp_path / "t.bin").write_bytes(raw[:-1])
    with pytest.raises(ParseError):
        load_table(tmp_path / "t.bin")
