"""Learners, items, interaction sequences and the synthetic learner simulator.

Dataset files hold one learner window per line with three semicolon
separated fields::

    learner_id;item,item,...;response,response,...

UTF-8, no header. The item catalog is a JSON object
``{"item_count": N, "metadata": {...}}``.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from .exceptions import ConfigError, ParseError, ValidationError

STAGE_COUNT = 4
DEFAULT_MAX_LEN = 200


@dataclass(frozen=True)
class Interaction:
    item_id: int
    response: int
    timestep: int


@dataclass(frozen=True, eq=False)
class LearnerSequence:
    """Time-ordered interactions of one learner (or one window of them)."""

    learner_id: int
    items: np.ndarray
    responses: np.ndarray

    def __post_init__(self):
        items = np.asarray(self.items, dtype=np.int64)
        responses = np.asarray(self.responses, dtype=np.int64)
        if items.ndim != 1 or items.shape != responses.shape:
            raise ValidationError("items and responses must be 1-D and equally long")
        if len(items) == 0:
            raise ValidationError(f"learner {self.learner_id}: empty sequence")
        if self.learner_id < 0:
            raise ValidationError(f"negative learner id {self.learner_id}")
        if items.min() < 0:
            raise ValidationError(f"learner {self.learner_id}: negative item id")
        if not np.isin(responses, (0, 1)).all():
            raise ValidationError(f"learner {self.learner_id}: responses must be 0 or 1")
        items.setflags(write=False)
        responses.setflags(write=False)
        object.__setattr__(self, "items", items)
        object.__setattr__(self, "responses", responses)

    def __len__(self):
        return len(self.items)

    def __eq__(self, other):
        if not isinstance(other, LearnerSequence):
            return NotImplemented
        return (
            self.learner_id == other.learner_id
            and np.array_equal(self.items, other.items)
            and np.array_equal(self.responses, other.responses)
        )

    @property
    def interactions(self) -> list[Interaction]:
        return [
            Interaction(int(i), int(r), t)
            for t, (i, r) in enumerate(zip(self.items, self.responses))
        ]

    @classmethod
    def from_pairs(cls, learner_id: int, pairs: Iterable[tuple[int, int]]) -> "LearnerSequence":
        pairs = list(pairs)
        return cls(learner_id, [p[0] for p in pairs], [p[1] for p in pairs])


@dataclass(frozen=True)
class ItemCatalog:
    item_count: int
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.item_count <= 0:
            raise ValidationError("item_count must be positive")

    def check_sequences(self, sequences: Iterable[LearnerSequence]) -> None:
        for seq in sequences:
            if seq.items.max() >= self.item_count:
                raise ValidationError(
                    f"learner {seq.learner_id}: item id {int(seq.items.max())} "
                    f"outside catalog of {self.item_count} items"
                )

    def fingerprint(self) -> str:
        payload = json.dumps({"item_count": self.item_count}, sort_keys=True)
        return hashlib.sha256(payload.encode()).hexdigest()[:16]

    def save(self, path) -> None:
        doc = {"item_count": self.item_count, "metadata": self.metadata}
        Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "ItemCatalog":
        try:
            doc = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ParseError(f"{path}: invalid catalog JSON ({exc})") from exc
        if not isinstance(doc, dict) or "item_count" not in doc:
            raise ParseError(f"{path}: catalog must be an object with item_count")
        unknown = set(doc) - {"item_count", "metadata"}
        if unknown:
            raise ParseError(f"{path}: unknown catalog keys {sorted(unknown)}")
        return cls(int(doc["item_count"]), dict(doc.get("metadata") or {}))


def split_windows(seq: LearnerSequence, max_len: int) -> list[LearnerSequence]:
    """Cut a sequence into consecutive windows of at most ``max_len``."""
    if max_len < 1:
        raise ValidationError("max_len must be positive")
    return [
        LearnerSequence(seq.learner_id, seq.items[i:i + max_len], seq.responses[i:i + max_len])
        for i in range(0, len(seq), max_len)
    ]


def _parse_ints(text: str, what: str, lineno: int) -> list[int]:
    try:
        return [int(tok) for tok in text.split(",")]
    except ValueError:
        raise ParseError(f"non-integer {what} field {text!r}", line=lineno) from None


def load_sequences(path, max_len: int = DEFAULT_MAX_LEN,
                   catalog: ItemCatalog | None = None) -> list[LearnerSequence]:
    if max_len < 2:
        raise ValidationError("max_len must be at least 2")
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(path)
    out: list[LearnerSequence] = []
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            fields = line.split(";")
            if len(fields) != 3:
                raise ParseError(f"expected 3 ';'-separated fields, got {len(fields)}", line=lineno)
            try:
                learner_id = int(fields[0])
            except ValueError:
                raise ParseError(f"non-integer learner id {fields[0]!r}", line=lineno) from None
            items = _parse_ints(fields[1], "item", lineno)
            responses = _parse_ints(fields[2], "response", lineno)
            if len(items) != len(responses):
                raise ParseError(
                    f"{len(items)} items but {len(responses)} responses", line=lineno)
            bad = [r for r in responses if r not in (0, 1)]
            if bad:
                raise ValidationError(f"line {lineno}: response {bad[0]} outside {{0,1}}")
            try:
                seq = LearnerSequence(learner_id, items, responses)
            except ValidationError as exc:
                raise ValidationError(f"line {lineno}: {exc}") from None
            if catalog is not None and seq.items.max() >= catalog.item_count:
                raise ValidationError(
                    f"line {lineno}: item id {int(seq.items.max())} exceeds catalog "
                    f"of {catalog.item_count} items")
            out.extend(split_windows(seq, max_len))
    return out


def format_sequence(seq: LearnerSequence) -> str:
    return "{};{};{}".format(
        seq.learner_id,
        ",".join(str(int(i)) for i in seq.items),
        ",".join(str(int(r)) for r in seq.responses),
    )


def write_sequences(path, sequences: Iterable[LearnerSequence]) -> int:
    """Write sequences one per line; returns the number of rows written."""
    n = 0
    with Path(path).open("w", encoding="utf-8", newline="\n") as fh:
        for seq in sequences:
            fh.write(format_sequence(seq) + "\n")
            n += 1
    return n


@dataclass(frozen=True)
class FoldSplit:
    k: int
    assignments: dict[int, int]

    def fold_of(self, learner_id: int) -> int:
        return self.assignments[learner_id]

    def learners_in(self, fold: int) -> list[int]:
        return sorted(lid for lid, f in self.assignments.items() if f == fold)

    def select(self, sequences: Sequence[LearnerSequence], folds: Iterable[int]) -> list[LearnerSequence]:
        wanted = set(folds)
        return [s for s in sequences if self.assignments[s.learner_id] in wanted]

    def train_valid_test(self, sequences, test_fold: int = 0):
        """Split with ``test_fold`` held out and the next fold used for validation."""
        valid_fold = (test_fold + 1) % self.k
        rest = [f for f in range(self.k) if f not in (test_fold, valid_fold)]
        return (self.select(sequences, rest),
                self.select(sequences, [valid_fold]),
                self.select(sequences, [test_fold]))


def make_folds(sequences: Sequence[LearnerSequence], k: int, seed: int) -> FoldSplit:
    """Learner-level k-fold assignment; all windows of a learner share a fold."""
    learners = sorted({s.learner_id for s in sequences})
    if k < 1:
        raise ConfigError("k must be positive")
    if k > len(learners):
        raise ConfigError(f"k={k} exceeds the number of learners ({len(learners)})")
    order = np.random.default_rng(seed).permutation(len(learners))
    assignments = {learners[j]: pos % k for pos, j in enumerate(order)}
    return FoldSplit(k, assignments)


# --- synthetic learner population -------------------------------------------------

@dataclass(frozen=True)
class SimulatorConfig:
    n_learners: int = 200
    n_items: int = 50
    seq_len: int = 50
    stage_count: int = STAGE_COUNT
    item_stage_profile_scale: float = 2.0
    learner_mastery_init_std: float = 1.0
    learning_rate_per_attempt: float = 0.05
    mastery_offset: float = 0.0
    seed: int = 42

    def __post_init__(self):
        for name in ("n_learners", "n_items", "seq_len"):
            if getattr(self, name) < 1:
                raise ValidationError(f"{name} must be a positive integer")
        if self.stage_count != STAGE_COUNT:
            raise ValidationError("stage_count is fixed at 4")
        for name in ("item_stage_profile_scale", "learner_mastery_init_std",
                     "learning_rate_per_attempt", "mastery_offset"):
            if not np.isfinite(getattr(self, name)):
                raise ValidationError(f"{name} must be finite")
        if self.learner_mastery_init_std < 0:
            raise ValidationError("learner_mastery_init_std must be non-negative")


@dataclass(frozen=True)
class GroundTruth:
    dominant_stage: np.ndarray      # (n_items,)
    profiles: np.ndarray            # (n_items, 4)
    initial_mastery: np.ndarray     # (n_learners, 4)
    final_mastery: np.ndarray       # (n_learners, 4)

    def to_json(self) -> dict:
        return {k: np.asarray(v).tolist() for k, v in self.__dict__.items()}


def item_profiles(n_items: int, scale: float, rng: np.random.Generator):
    """Dominant stage per item and a positive stage-profile vector peaked on it."""
    dominant = rng.integers(0, STAGE_COUNT, size=n_items)
    profiles = 0.2 * rng.uniform(size=(n_items, STAGE_COUNT))
    profiles[np.arange(n_items), dominant] += 1.0
    return dominant, scale * profiles


def response_probability(mastery: np.ndarray, profile: np.ndarray) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-(mastery * profile).sum(axis=-1)))


def simulate_population(config: SimulatorConfig):
    """Sample a catalog, learner sequences and the generating parameters.

    Each attempt adds ``learning_rate_per_attempt`` to the learner's mastery
    of the attempted item's dominant stage, so the chance of success depends
    on which stages a learner has practised.
    """
    rng = np.random.default_rng(config.seed)
    dominant, profiles = item_profiles(config.n_items, config.item_stage_profile_scale, rng)
    initial = config.mastery_offset + config.learner_mastery_init_std * rng.standard_normal(
        (config.n_learners, STAGE_COUNT))
    final = initial.copy()
    sequences = []
    for lid in range(config.n_learners):
        items = rng.integers(0, config.n_items, size=config.seq_len)
        draws = rng.uniform(size=config.seq_len)
        responses = np.empty(config.seq_len, dtype=np.int64)
        mastery = final[lid]
        for t, item in enumerate(items):
            responses[t] = draws[t] < response_probability(mastery, profiles[item])
            mastery[dominant[item]] += config.learning_rate_per_attempt
        sequences.append(LearnerSequence(lid, items, responses))
    catalog = ItemCatalog(config.n_items, {"source": "synthetic", "seed": config.seed})
    truth = GroundTruth(dominant, profiles, initial, final)
    return catalog, sequences, truth


def iter_windows(sequences: Iterable[LearnerSequence], max_len: int) -> Iterator[LearnerSequence]:
    for seq in sequences:
        yield from split_windows(seq, max_len)
