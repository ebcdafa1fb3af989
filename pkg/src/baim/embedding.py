"""Stage-level item embeddings from solver hidden-state dumps.

Pipeline per item and stage: mean over the stage's token span at every
layer, then a layer pooling step, then one PCA projection shared by all
(item, stage) vectors. Dumps hold float32 tensors; every reduction here runs
in float64.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import STAGE_COUNT, ItemCatalog, item_profiles
from .exceptions import ParseError, ValidationError

STRATEGIES = ("global", "final_layer", "holistic")

DUMP_MAGIC = b"BAIMDUMP"
DUMP_VERSION = 1
_DUMP_HEADER = struct.Struct("<8sHIHII8I")
_TABLE_HEADER = struct.Struct("<III")


@dataclass(frozen=True, eq=False)
class HiddenStateDump:
    """Token x layer hidden states of one solved item plus its four stage spans.

    ``tensor`` has shape (layers, tokens, width). ``spans[p]`` is the inclusive
    (start, end) token range of stage p.
    """

    item_id: int
    tensor: np.ndarray
    spans: tuple

    def __post_init__(self):
        tensor = np.asarray(self.tensor, dtype=np.float32)
        if tensor.ndim != 3 or min(tensor.shape) < 1:
            raise ValidationError(f"item {self.item_id}: tensor must be L x T x D")
        if not np.isfinite(tensor).all():
            raise ValidationError(f"item {self.item_id}: non-finite hidden states")
        spans = tuple((int(s), int(e)) for s, e in self.spans)
        if len(spans) != STAGE_COUNT:
            raise ValidationError(f"item {self.item_id}: need {STAGE_COUNT} spans")
        T = tensor.shape[1]
        for p, (s, e) in enumerate(spans):
            if not 0 <= s <= e < T:
                raise ValidationError(
                    f"item {self.item_id}: stage {p} span ({s}, {e}) invalid for T={T}")
        tensor.setflags(write=False)
        object.__setattr__(self, "tensor", tensor)
        object.__setattr__(self, "spans", spans)

    @property
    def shape(self):
        return self.tensor.shape


def temporal_aggregate(dump: HiddenStateDump, p: int) -> np.ndarray:
    """Mean of the stage-``p`` token vectors at every layer, shape (L, D)."""
    if p not in range(STAGE_COUNT):
        raise ValidationError(f"stage index {p} outside 0..3")
    start, end = dump.spans[p]
    return dump.tensor[:, start:end + 1, :].astype(np.float64).mean(axis=1)


def layer_pool(stage_layer_vectors: np.ndarray, strategy: str = "global") -> np.ndarray:
    vecs = np.asarray(stage_layer_vectors, dtype=np.float64)
    if vecs.ndim != 2 or len(vecs) < 1:
        raise ValidationError("expected an (L, D) array with L >= 1")
    if strategy == "global":
        return vecs.mean(axis=0)
    if strategy == "final_layer":
        return vecs[-1].copy()
    raise ValidationError(f"unknown layer pooling strategy {strategy!r}")


def holistic_pool(dump: HiddenStateDump) -> np.ndarray:
    """Mean over every token covered by any stage span, then over layers."""
    tokens = sorted({t for s, e in dump.spans for t in range(s, e + 1)})
    if not tokens:
        raise ValidationError(f"item {dump.item_id}: empty span union")
    return dump.tensor[:, tokens, :].astype(np.float64).mean(axis=1).mean(axis=0)


def stage_vectors(dump: HiddenStateDump, strategy: str = "global") -> np.ndarray:
    """Pre-PCA stage vectors of one item, shape (4, D)."""
    if strategy == "holistic":
        return np.tile(holistic_pool(dump), (STAGE_COUNT, 1))
    return np.stack([layer_pool(temporal_aggregate(dump, p), strategy)
                     for p in range(STAGE_COUNT)])


# --- PCA ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class PcaModel:
    mean: np.ndarray
    components: np.ndarray           # (k, D), orthonormal rows
    explained_variance: np.ndarray   # (k,), non-increasing
    target_dim: int
    zero_variance: np.ndarray        # (k,) bool; components spanning no variance

    @property
    def n_components(self) -> int:
        return len(self.components)

    @property
    def input_dim(self) -> int:
        return len(self.mean)

    def metadata(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "n_components": self.n_components,
            "target_dim": self.target_dim,
            "explained_variance": self.explained_variance.tolist(),
            "zero_variance": self.zero_variance.tolist(),
        }


def fit_pca(vectors: np.ndarray, target_dim: int) -> PcaModel:
    """Mean-centred PCA keeping ``min(target_dim, D, N - 1)`` components.

    Variances use the N - 1 denominator. Each component is oriented so that
    its largest-magnitude entry is positive.
    """
    X = np.asarray(vectors, dtype=np.float64)
    if X.ndim != 2:
        raise ValidationError("PCA input must be an (N, D) matrix")
    n, d = X.shape
    if n < 2:
        raise ValidationError("PCA needs at least 2 vectors")
    if target_dim < 1:
        raise ValidationError("target_dim must be positive")
    if not np.isfinite(X).all():
        raise ValidationError("PCA input contains non-finite values")
    mean = X.mean(axis=0)
    _, sing, vt = np.linalg.svd(X - mean, full_matrices=False)
    k = min(target_dim, d, n - 1)
    components = vt[:k].copy()
    variance = sing[:k] ** 2 / (n - 1)
    pivots = np.abs(components).argmax(axis=1)
    signs = np.sign(components[np.arange(k), pivots])
    components *= np.where(signs == 0, 1.0, signs)[:, None]
    scale = max(variance[0] if k else 0.0, 1.0)
    zero = variance <= 1e-12 * scale
    variance[zero] = 0.0
    return PcaModel(mean, components, variance, int(target_dim), zero)


def apply_pca(model: PcaModel, vector: np.ndarray) -> np.ndarray:
    """Project one vector (or a stack of them), zero-padding up to ``target_dim``."""
    v = np.asarray(vector, dtype=np.float64)
    if v.shape[-1] != model.input_dim:
        raise ValidationError(
            f"vector width {v.shape[-1]} does not match PCA input width {model.input_dim}")
    proj = (v - model.mean) @ model.components.T
    pad = model.target_dim - model.n_components
    if pad > 0:
        proj = np.concatenate([proj, np.zeros(proj.shape[:-1] + (pad,))], axis=-1)
    return proj


# --- embedding table ---------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class StageEmbeddingTable:
    matrix: np.ndarray               # (item_count, 4, dim)
    strategy: str = "global"
    pca: PcaModel | None = None
    info: dict = field(default_factory=dict)

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.float64)
        if m.ndim != 3 or m.shape[1] != STAGE_COUNT:
            raise ValidationError("table matrix must have shape (items, 4, dim)")
        if not np.isfinite(m).all():
            raise ValidationError("table contains non-finite values")
        object.__setattr__(self, "matrix", m)

    @property
    def item_count(self) -> int:
        return self.matrix.shape[0]

    @property
    def dim(self) -> int:
        return self.matrix.shape[2]

    def __getitem__(self, item_id):
        if not 0 <= item_id < self.item_count:
            raise ValidationError(f"item {item_id} not in table")
        return self.matrix[item_id]

    def sidecar(self) -> dict:
        doc = {"item_count": self.item_count, "stage_count": STAGE_COUNT,
               "dim": self.dim, "strategy": self.strategy, "target_dim": self.dim}
        if self.pca is not None:
            doc["pca"] = self.pca.metadata()
        doc.update(self.info)
        return doc


def build_table(dumps: Sequence[HiddenStateDump], target_dim: int,
                strategy: str = "global", item_count: int | None = None) -> StageEmbeddingTable:
    """Pool every dump and project all (item, stage) vectors with one shared PCA."""
    if strategy not in STRATEGIES:
        raise ValidationError(f"unknown strategy {strategy!r}; expected one of {STRATEGIES}")
    by_item: dict[int, HiddenStateDump] = {}
    for dump in dumps:
        if dump.item_id in by_item:
            raise ValidationError(f"duplicate dump for item {dump.item_id}")
        by_item[dump.item_id] = dump
    n = item_count if item_count is not None else len(by_item)
    missing = sorted(set(range(n)) - set(by_item))
    if missing:
        raise ValidationError(f"missing dumps for items {missing}")
    extra = sorted(set(by_item) - set(range(n)))
    if extra:
        raise ValidationError(f"dumps for items outside the catalog: {extra}")
    widths = {by_item[i].shape[2] for i in range(n)}
    if len(widths) != 1:
        raise ValidationError(f"dumps disagree on hidden width: {sorted(widths)}")

    pooled = np.stack([stage_vectors(by_item[i], strategy) for i in range(n)])
    if strategy == "holistic":
        # every stage slot holds the same vector; fit on the distinct ones
        pca = fit_pca(pooled[:, 0, :], target_dim)
    else:
        pca = fit_pca(pooled.reshape(n * STAGE_COUNT, -1), target_dim)
    matrix = apply_pca(pca, pooled)
    return StageEmbeddingTable(matrix, strategy, pca)


def save_table(table: StageEmbeddingTable, path, extra: dict | None = None) -> None:
    """Binary table (u32 item_count, stage_count, dim + float32 data) plus JSON sidecar."""
    path = Path(path)
    data = np.ascontiguousarray(table.matrix, dtype="<f4")
    with path.open("wb") as fh:
        fh.write(_TABLE_HEADER.pack(table.item_count, STAGE_COUNT, table.dim))
        fh.write(data.tobytes())
    doc = table.sidecar()
    doc.update(extra or {})
    sidecar_path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n",
                                  encoding="utf-8")


def sidecar_path(path) -> Path:
    path = Path(path)
    return path.with_suffix(path.suffix + ".json")


def load_table(path) -> StageEmbeddingTable:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < _TABLE_HEADER.size:
        raise ParseError(f"{path}: truncated table header")
    n, stages, dim = _TABLE_HEADER.unpack_from(raw)
    if stages != STAGE_COUNT:
        raise ParseError(f"{path}: stage_count {stages} != 4")
    expected = _TABLE_HEADER.size + 4 * n * stages * dim
    if len(raw) != expected:
        raise ParseError(f"{path}: expected {expected} bytes, found {len(raw)}")
    matrix = np.frombuffer(raw, dtype="<f4", offset=_TABLE_HEADER.size).reshape(n, stages, dim)
    info = {}
    side = sidecar_path(path)
    if side.is_file():
        info = json.loads(side.read_text(encoding="utf-8"))
    strategy = info.pop("strategy", "global")
    for key in ("item_count", "stage_count", "dim", "target_dim", "pca"):
        info.pop(key, None)
    return StageEmbeddingTable(matrix.astype(np.float64), strategy, None, info)


# --- dump files --------------------------------------------------------------------

def encode_dump(dump: HiddenStateDump) -> bytes:
    L, T, D = dump.shape
    flat_spans = [v for span in dump.spans for v in span]
    header = _DUMP_HEADER.pack(DUMP_MAGIC, DUMP_VERSION, dump.item_id, L, T, D, *flat_spans)
    return header + np.ascontiguousarray(dump.tensor, dtype="<f4").tobytes()


def decode_dump(buf, offset: int = 0) -> tuple[HiddenStateDump, int]:
    """Decode one record starting at ``offset``; returns the dump and the next offset."""
    if len(buf) - offset < _DUMP_HEADER.size:
        raise ParseError(f"truncated dump header at offset {offset}")
    magic, version, item_id, L, T, D, *spans = _DUMP_HEADER.unpack_from(buf, offset)
    if magic != DUMP_MAGIC:
        raise ParseError(f"bad dump magic at offset {offset}")
    if version != DUMP_VERSION:
        raise ParseError(f"unsupported dump version {version}")
    start = offset + _DUMP_HEADER.size
    count = L * T * D
    if len(buf) - start < 4 * count:
        raise ParseError(f"truncated tensor for item {item_id}")
    tensor = np.frombuffer(buf, dtype="<f4", count=count, offset=start).reshape(L, T, D)
    pairs = tuple(zip(spans[0::2], spans[1::2]))
    return HiddenStateDump(item_id, tensor.copy(), pairs), start + 4 * count


def write_dumps(container, dumps: Sequence[HiddenStateDump], index=None) -> Path:
    """Write dumps into one container file and a JSON-lines index next to it."""
    container = Path(container)
    index = Path(index) if index is not None else container.with_suffix(".index.jsonl")
    lines = []
    offset = 0
    with container.open("wb") as fh:
        for dump in dumps:
            blob = encode_dump(dump)
            fh.write(blob)
            lines.append(json.dumps({"item_id": dump.item_id, "path": container.name,
                                     "offset": offset}, sort_keys=True))
            offset += len(blob)
    index.write_text("".join(line + "\n" for line in lines), encoding="utf-8")
    return index


def read_dumps(index) -> list[HiddenStateDump]:
    index = Path(index)
    blobs: dict[Path, bytes] = {}
    dumps = []
    for lineno, line in enumerate(index.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            entry = json.loads(line)
            target = index.parent / entry["path"]
            offset = int(entry["offset"])
            item_id = int(entry["item_id"])
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise ParseError(f"{index}: bad index entry ({exc})", line=lineno) from None
        if target not in blobs:
            blobs[target] = target.read_bytes()
        dump, _ = decode_dump(blobs[target], offset)
        if dump.item_id != item_id:
            raise ParseError(f"{index}: entry says item {item_id}, record holds {dump.item_id}",
                             line=lineno)
        dumps.append(dump)
    return dumps


# --- synthetic dumps ---------------------------------------------------------------

def tile_spans(T: int, rng: np.random.Generator) -> tuple:
    """Four contiguous non-empty blocks covering tokens 0..T-1."""
    cuts = np.sort(rng.choice(np.arange(1, T), size=STAGE_COUNT - 1, replace=False))
    bounds = [0, *cuts.tolist(), T]
    return tuple((bounds[p], bounds[p + 1] - 1) for p in range(STAGE_COUNT))


def synth_dumps(catalog: ItemCatalog, L: int, T: int, D: int, seed: int,
                profiles: np.ndarray | None = None, profile_scale: float = 1.0,
                noise_std: float = 0.5) -> list[HiddenStateDump]:
    """Stand-in solver dumps whose stage spans carry each item's stage profile.

    Every token of item i is built from an item signature (a fixed linear
    image of the item's profile plus an idiosyncratic part) and, within stage
    p, a shift of ``profile_scale * profile[i, p]`` along a stage direction.
    With ``profile_scale = 0`` the four stages are exchangeable.
    """
    if T < STAGE_COUNT:
        raise ValidationError(f"T={T} cannot hold {STAGE_COUNT} non-empty stage spans")
    if min(L, D) < 1:
        raise ValidationError("L and D must be positive")
    rng = np.random.default_rng(seed)
    n = catalog.item_count
    if profiles is None:
        _, profiles = item_profiles(n, 1.0, rng)
    profiles = np.asarray(profiles, dtype=np.float64)
    if profiles.shape != (n, STAGE_COUNT):
        raise ValidationError(f"profiles must have shape ({n}, 4)")

    stage_dirs = rng.standard_normal((STAGE_COUNT, D))
    stage_dirs /= np.linalg.norm(stage_dirs, axis=1, keepdims=True)
    mix = rng.standard_normal((STAGE_COUNT, D)) / np.sqrt(STAGE_COUNT)
    layer_bias = 0.5 * rng.standard_normal((L, 1, D))
    layer_gain = rng.uniform(0.5, 1.5, size=(L, 1, 1))

    dumps = []
    for i in range(n):
        spans = tile_spans(T, rng)
        signature = profiles[i] @ mix + 0.3 * rng.standard_normal(D)
        base = np.empty((T, D))
        for p, (s, e) in enumerate(spans):
            base[s:e + 1] = signature + profile_scale * profiles[i, p] * 2.0 * stage_dirs[p]
        tensor = layer_bias + layer_gain * base[None] + noise_std * rng.standard_normal((L, T, D))
        dumps.append(HiddenStateDump(i, tensor.astype(np.float32), spans))
    return dumps
