"""Input checks shared by the estimators and the CLI."""

from __future__ import annotations

from typing import Iterable, Sequence

import numpy as np

from .data import STAGE_COUNT, LearnerSequence
from .embedding import HiddenStateDump, StageEmbeddingTable
from .exceptions import ValidationError


def check_sequences(X, item_count: int | None = None) -> list[LearnerSequence]:
    """Accept a list of ``LearnerSequence`` or of (learner_id, items, responses) triples."""
    if isinstance(X, LearnerSequence):
        X = [X]
    out = []
    for k, seq in enumerate(X):
        if not isinstance(seq, LearnerSequence):
            try:
                learner_id, items, responses = seq
            except (TypeError, ValueError):
                raise ValidationError(
                    f"element {k} is neither a LearnerSequence nor a "
                    f"(learner_id, items, responses) triple") from None
            seq = LearnerSequence(int(learner_id), items, responses)
        if item_count is not None and seq.items.max() >= item_count:
            raise ValidationError(
                f"learner {seq.learner_id}: item {int(seq.items.max())} outside "
                f"catalog of {item_count} items")
        out.append(seq)
    if not out:
        raise ValidationError("no sequences given")
    return out


def check_stage_table(table, item_count: int | None = None) -> np.ndarray:
    matrix = table.matrix if isinstance(table, StageEmbeddingTable) else np.asarray(table, float)
    if matrix.ndim != 3 or matrix.shape[1] != STAGE_COUNT:
        raise ValidationError(f"stage table must be (items, 4, dim), got {matrix.shape}")
    if item_count is not None and matrix.shape[0] != item_count:
        raise ValidationError(
            f"stage table covers {matrix.shape[0]} items, catalog has {item_count}")
    if not np.isfinite(matrix).all():
        raise ValidationError("stage table contains non-finite values")
    return matrix


def check_dumps(dumps: Iterable) -> list[HiddenStateDump]:
    dumps = list(dumps)
    for k, d in enumerate(dumps):
        if not isinstance(d, HiddenStateDump):
            raise ValidationError(f"element {k} is not a HiddenStateDump")
    if not dumps:
        raise ValidationError("no dumps given")
    return dumps


def check_matrix(X, min_rows: int = 1) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise ValidationError(f"expected a 2-D array, got shape {X.shape}")
    if X.shape[0] < min_rows:
        raise ValidationError(f"need at least {min_rows} rows, got {X.shape[0]}")
    if not np.isfinite(X).all():
        raise ValidationError("input contains non-finite values")
    return X


def learner_ids(sequences: Sequence[LearnerSequence]) -> list[int]:
    return sorted({s.learner_id for s in sequences})
