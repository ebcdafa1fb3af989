import json
import math

import numpy as np
import pytest
import torch

from baim.backbones import BackboneConfig
from baim.checkpoint import decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint
from baim.data import LearnerSequence
from baim.exceptions import ConfigError, NumericError, ParseError, ValidationError
from baim.model import Batch, KTModel, ModelConfig
from baim.router import RouterConfig
from baim.training import (SequenceTrace, TrainConfig, auc, evaluate, grad_check, kt_loss,
                           model_grad_check, stage_shifts, total_loss, train)

from oracles import auc_pairs, bce_loop


def tiny_model(mode="baim", kind="recurrent", items=6, d=4, dropout=0.1, noise=0.25, seed=0,
               routing="adaptive"):
    torch.manual_seed(seed)
    table = np.random.default_rng(seed).standard_normal((items, 4, d))
    cfg = ModelConfig(items, mode, routing, RouterConfig(d, 8, 3, dropout=dropout, noise_std=noise),
                      BackboneConfig(kind, 8, 8, 2, 50, dropout))
    return KTModel(cfg, table if mode == "baim" else None)


def random_seqs(n, items=6, length=12, seed=0, start_id=0):
    rng = np.random.default_rng(seed)
    return [LearnerSequence(start_id + i, rng.integers(0, items, length), rng.integers(0, 2, length))
            for i in range(n)]


# --- kt_loss / total_loss ---------------------------------------------------------

def test_bce_near_perfect():
    assert kt_loss(torch.tensor([1 - 1e-7], dtype=torch.float64), torch.tensor([1])) <= 2e-7


def test_bce_one_half():
    for r in (0, 1):
        assert abs(float(kt_loss(torch.tensor([0.5]), torch.tensor([r]))) - math.log(2)) < 1e-6


def test_bce_symmetry_and_oracle():
    rng = np.random.default_rng(0)
    y, r = rng.uniform(size=50), rng.integers(0, 2, 50)
    a = float(kt_loss(torch.from_numpy(y), torch.from_numpy(r)))
    b = float(kt_loss(torch.from_numpy(1 - y), torch.from_numpy(1 - r)))
    assert abs(a - b) < 1e-12
    assert abs(a - bce_loop(y.tolist(), r.tolist())) < 1e-12


def test_bce_clips_extremes_and_masks():
    y = torch.tensor([0.0, 1.0, 0.3], dtype=torch.float64)
    r = torch.tensor([1, 0, 1])
    loss = kt_loss(y, r, torch.tensor([True, True, False]))
    assert math.isfinite(float(loss))
    assert abs(float(loss) - bce_loop([0.0, 1.0], [1, 0])) < 1e-9
    with pytest.raises(ValidationError):
        kt_loss(y, r, torch.zeros(3, dtype=torch.bool))


def test_total_loss_values():
    assert total_loss(0.42, 0.3, 0.0) == 0.42
    assert abs(total_loss(0.7, 0.75, 0.01) - 0.7075) < 1e-12
    assert abs((total_loss(0.7, 0.75, 0.1) - total_loss(0.7, 0.75, 0.01)) - 0.0675) < 1e-12


# --- auc ------------------------------------------------------------------------------

def test_auc_examples():
    assert auc([0.9, 0.1], [1, 0]) == 1.0
    assert auc([0.3] * 6, [1, 0, 1, 0, 0, 1]) == 0.5
    assert auc([0.8, 0.6, 0.4], [1, 0, 1]) == 0.5


def test_auc_matches_pairwise_oracle():
    rng = np.random.default_rng(1)
    for _ in range(20):
        s = np.round(rng.uniform(size=40), 1)    # plenty of ties
        l = rng.integers(0, 2, 40)
        l[:2] = (0, 1)
        assert abs(auc(s, l) - auc_pairs(s.tolist(), l.tolist())) < 1e-12


def test_auc_single_class_is_an_error():
    with pytest.raises(ValidationError):
        auc([0.2, 0.4], [1, 1])


# --- gradient checks --------------------------------------------------------------

def test_grad_check_quadratic():
    w = torch.randn(7, dtype=torch.float64)
    assert grad_check(lambda v: (v ** 2).sum(), w) < 1e-8


def _five_step_batches(items=6):
    def make(attempt):
        rng = np.random.default_rng(100 + attempt)
        return Batch.from_sequences([LearnerSequence(0, rng.integers(0, items, 5),
                                                     rng.integers(0, 2, 5))])
    return make


def test_model_grad_check_recurrent():
    report = model_grad_check(tiny_model(), _five_step_batches())
    assert report.max_rel_error < 1e-4
    used = set(report.routes.reshape(-1).tolist())
    dead = [k for k in range(4) if k not in used]
    assert dead, "test batch should leave at least one expert unused"
    for k in dead:
        for name, g in report.analytic.items():
            if name.startswith(f"items.experts.{k}."):
                assert torch.all(g == 0)
                assert report.numeric[name].abs().max() < 1e-8


def test_model_grad_check_attention_and_static():
    assert model_grad_check(tiny_model(kind="attention"), _five_step_batches()).max_rel_error < 1e-4
    assert model_grad_check(tiny_model(mode="static"), _five_step_batches()).max_rel_error < 1e-4


# --- training loop ------------------------------------------------------------------

def test_overfit_tiny_set():
    model = tiny_model(dropout=0.0, noise=0.0)
    seq = LearnerSequence(0, [0, 1, 2, 3, 4, 0, 1, 2, 3, 4], [1, 0, 0, 1, 1, 0, 1, 1, 0, 0])
    batch = Batch.from_sequences([seq])
    opt = torch.optim.Adam(model.parameters(), lr=1e-2)
    model.train()
    for _ in range(500):
        loss = kt_loss(model.run(batch).probs, batch.responses, batch.mask)
        opt.zero_grad()
        loss.backward()
        opt.step()
    model.eval()
    with torch.no_grad():
        assert float(kt_loss(model.run(batch).probs, batch.responses, batch.mask)) < 0.1


def _quick(model, seed=3, epochs=3, log_path=None, lam=0.01):
    cfg = TrainConfig(batch_size=4, learning_rate=1e-2, epochs=epochs, seed=seed, lambda_lb=lam)
    return train(model, random_seqs(12, seed=1), random_seqs(5, seed=2, start_id=100), cfg,
                 log_path=log_path)


def test_training_is_deterministic(tmp_path):
    a = _quick(tiny_model(), log_path=tmp_path / "a.jsonl")
    b = _quick(tiny_model(), log_path=tmp_path / "b.jsonl")
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()
    for (_, pa), (_, pb) in zip(a.model.state_dict().items(), b.model.state_dict().items()):
        assert torch.equal(pa, pb)
    entry = json.loads((tmp_path / "a.jsonl").read_text().splitlines()[0])
    assert {"epoch", "train_loss", "train_kt", "train_lb", "valid_auc",
            "valid_routing_shares"} <= set(entry)
    assert abs(sum(entry["valid_routing_shares"]) - 1) < 1e-6


def test_training_restores_best_epoch():
    result = _quick(tiny_model(), epochs=6)
    best = result.log[result.best_epoch - 1]
    assert best["valid_auc"] == max(e["valid_auc"] for e in result.log)
    assert evaluate(result.model, random_seqs(5, seed=2, start_id=100)).auc == best["valid_auc"]


def test_training_rejects_overlap():
    seqs = random_seqs(4)
    with pytest.raises(ValidationError):
        train(tiny_model(), seqs, seqs[:1], TrainConfig(epochs=1))


def test_non_finite_loss_aborts():
    model = tiny_model()
    with torch.no_grad():
        model.backbone.head[-1].bias.fill_(float("nan"))
    with pytest.raises(NumericError, match="parameter norms"):
        _quick(model, epochs=1)


def test_train_config_validation():
    with pytest.raises(ValidationError):
        TrainConfig(lambda_lb=-1)
    with pytest.raises(ValidationError):
        TrainConfig(batch_size=0)
    assert (TrainConfig().batch_size, TrainConfig().learning_rate, TrainConfig().lambda_lb) == (
        128, 1e-4, 0.01)


# --- evaluate / stage shifts ---------------------------------------------------------

def test_stage_shift_counting():
    tr = [SequenceTrace(0, np.array([1, 2, 1, 1]), np.zeros(4), np.zeros(4), None,
                        np.array([0, 3, 2, 2])),
          SequenceTrace(0, np.array([1, 5]), np.zeros(2), np.zeros(2), None, np.array([1, 0])),
          SequenceTrace(1, np.array([1, 1]), np.zeros(2), np.zeros(2), None, np.array([3, 3]))]
    repeated, shifted, per = stage_shifts(tr)
    # learner 0: item 1 at 0 -> 2 (shift), 2 -> 3 (same), window 2 -> stage 1 (shift)
    assert (repeated, shifted) == (4, 2)
    assert per == {0: (3, 2), 1: (1, 0)}


def test_static_model_reports_no_shift():
    metrics = evaluate(tiny_model(mode="static"), random_seqs(6, length=20))
    assert metrics.routing_shares is None
    assert metrics.repeated_count > 0 and metrics.shift_count == 0


def test_fixed_stage_model_reports_no_shift():
    metrics = evaluate(tiny_model(routing="fixed-2"), random_seqs(6, length=20))
    assert metrics.routing_shares == [0.0, 0.0, 1.0, 0.0] and metrics.shift_count == 0


def test_evaluate_shares_sum_to_one():
    m = evaluate(tiny_model(), random_seqs(6, length=20))
    assert abs(sum(m.routing_shares) - 1) < 1e-6 and m.n_steps == 120


# --- checkpoints -----------------------------------------------------------------------

def test_checkpoint_round_trip_bytes(tmp_path):
    model = tiny_model()
    save_checkpoint(tmp_path / "a.bin", model, {"seed": 3, "epoch": 1})
    loaded, meta = load_checkpoint(tmp_path / "a.bin")
    save_checkpoint(tmp_path / "b.bin", loaded, {k: v for k, v in meta.items()
                                               if k not in ("model_config", "config_hash")})
    assert (tmp_path / "a.bin").read_bytes() == (tmp_path / "b.bin").read_bytes()
    assert meta["seed"] == 3 and meta["config_hash"] == model.config.config_hash()


def test_checkpoint_evaluates_identically(tmp_path):
    model = _quick(tiny_model(), epochs=2).model
    save_checkpoint(tmp_path / "m.bin", model)
    loaded, _ = load_checkpoint(tmp_path / "m.bin")
    seqs = random_seqs(5, seed=9)
    assert evaluate(loaded, seqs).to_dict() == evaluate(model, seqs).to_dict()


def test_checkpoint_config_mismatch(tmp_path):
    model = tiny_model()
    save_checkpoint(tmp_path / "m.bin", model)
    c = model.config
    other = ModelConfig(c.item_count, c.item_repr_mode, c.routing,
                        RouterConfig(4, 16, 3), BackboneConfig("recurrent", 16, 8, 2, 50))
    with pytest.raises(ConfigError, match="d_kt"):
        load_checkpoint(tmp_path / "m.bin", expected_config=other)


def test_checkpoint_corruption(tmp_path):
    raw = encode_checkpoint(tiny_model().state_dict(), tiny_model().config)
    with pytest.raises(ParseError):
        decode_checkpoint(b"XXXXXXXX" + raw[8:])
    with pytest.raises(ParseError):
        decode_checkpoint(raw + b"\0")
    tampered = bytearray(raw)
    tampered[10] ^= 0xFF
    (tmp_path / "t.bin").write_bytes(bytes(tampered))
    with pytest.raises(ConfigError):
        load_checkpoint(tmp_path / "t.bin")
