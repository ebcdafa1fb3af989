"""Losses, metrics, the optimisation loop and finite-difference gradient checks."""

from __future__ import annotations

import copy
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
from scipy.stats import rankdata
from torch.func import functional_call

from .data import STAGE_COUNT, LearnerSequence
from .exceptions import NumericError, ValidationError
from .model import Batch, KTModel

logger = logging.getLogger(__name__)

PROB_CLIP = 1e-7


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 128
    learning_rate: float = 1e-4
    epochs: int = 200
    lambda_lb: float = 0.01
    seed: int = 42
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    patience: int = 10

    def __post_init__(self):
        if self.batch_size < 1 or self.epochs < 1 or self.patience < 1:
            raise ValidationError("batch_size, epochs and patience must be positive")
        if not self.learning_rate > 0:
            raise ValidationError("learning_rate must be positive")
        if not self.lambda_lb >= 0:
            raise ValidationError("lambda_lb must be non-negative")


# --- losses and metrics --------------------------------------------------------------

def kt_loss(y, r, mask=None):
    """Mean binary cross-entropy over unmasked steps; ``y`` is clipped to [1e-7, 1 - 1e-7]."""
    y = torch.as_tensor(y)
    if not y.is_floating_point():
        y = y.to(torch.float64)
    r = torch.as_tensor(r).to(y.dtype)
    if y.shape != r.shape:
        raise ValidationError(f"prediction shape {tuple(y.shape)} != label shape {tuple(r.shape)}")
    if mask is not None:
        mask = torch.as_tensor(mask, dtype=torch.bool)
        y, r = y[mask], r[mask]
    if y.numel() == 0:
        raise ValidationError("kt_loss needs at least one unmasked step")
    y = y.clamp(PROB_CLIP, 1 - PROB_CLIP)
    return -(r * torch.log(y) + (1 - r) * torch.log1p(-y)).mean()


def total_loss(kt, lb, lam):
    return kt + lam * lb


def auc(scores, labels) -> float:
    """ROC AUC as the Mann-Whitney statistic; tied scores count one half."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel()
    if scores.shape != labels.shape:
        raise ValidationError("scores and labels differ in length")
    pos = labels == 1
    n_pos = int(pos.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValidationError("AUC is undefined without both positive and negative labels")
    ranks = rankdata(scores)
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


@dataclass
class Metrics:
    auc: float
    bce: float
    n_steps: int
    routing_shares: list | None
    repeated_count: int = 0
    shift_count: int = 0
    learners_with_repeats: int = 0
    learners_with_shift: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class SequenceTrace:
    learner_id: int
    items: np.ndarray
    responses: np.ndarray
    y: np.ndarray
    probs: np.ndarray | None       # (T, 4)
    selected: np.ndarray | None    # (T,)


def iter_batches(sequences, batch_size):
    for start in range(0, len(sequences), batch_size):
        yield sequences[start:start + batch_size]


@torch.no_grad()
def trace_sequences(model: KTModel, sequences: Sequence[LearnerSequence],
                    batch_size: int = 256) -> list[SequenceTrace]:
    """Eval-mode predictions and routing decisions for every step of every sequence."""
    was_training = model.training
    model.eval()
    traces = []
    try:
        for chunk in iter_batches(list(sequences), batch_size):
            batch = Batch.from_sequences(chunk)
            out = model.run(batch)
            y = out.probs.cpu().numpy()
            routed = model.routed
            probs = out.routing.probs.cpu().numpy() if routed else None
            sel = out.routing.selected.cpu().numpy() if routed else None
            for b, seq in enumerate(chunk):
                n = len(seq)
                traces.append(SequenceTrace(
                    seq.learner_id, seq.items, seq.responses, y[b, :n].copy(),
                    None if probs is None else probs[b, :n].copy(),
                    None if sel is None else sel[b, :n].copy()))
    finally:
        model.train(was_training)
    return traces


def stage_shifts(traces: Sequence[SequenceTrace]):
    """Repeated (learner, item) attempts and how many of them changed stage.

    An attempt is repeated when the learner has met the item before; it is
    stage-shifted when its selected stage differs from the previous attempt's.
    Returns (repeated, shifted, per-learner {id: (repeated, shifted)}).
    """
    last: dict[tuple[int, int], int] = {}
    per_learner: dict[int, list[int]] = {}
    for tr in traces:
        counts = per_learner.setdefault(tr.learner_id, [0, 0])
        for t, item in enumerate(tr.items):
            key = (tr.learner_id, int(item))
            stage = -1 if tr.selected is None else int(tr.selected[t])
            if key in last:
                counts[0] += 1
                if tr.selected is not None and stage != last[key]:
                    counts[1] += 1
            last[key] = stage
    repeated = sum(c[0] for c in per_learner.values())
    shifted = sum(c[1] for c in per_learner.values())
    return repeated, shifted, {k: tuple(v) for k, v in per_learner.items()}


def evaluate(model: KTModel, sequences: Sequence[LearnerSequence],
             batch_size: int = 256) -> Metrics:
    traces = trace_sequences(model, sequences, batch_size)
    y = np.concatenate([t.y for t in traces]).astype(np.float64)
    r = np.concatenate([t.responses for t in traces])
    shares = None
    if model.routed:
        chosen = np.concatenate([t.selected for t in traces])
        shares = (np.bincount(chosen, minlength=STAGE_COUNT) / len(chosen)).tolist()
    repeated, shifted, per = stage_shifts(traces)
    return Metrics(
        auc=auc(y, r),
        bce=float(kt_loss(torch.from_numpy(y), torch.from_numpy(r))),
        n_steps=len(y),
        routing_shares=shares,
        repeated_count=repeated,
        shift_count=shifted,
        learners_with_repeats=sum(1 for rep, _ in per.values() if rep > 0),
        learners_with_shift=sum(1 for _, sh in per.values() if sh > 0),
    )


# --- training loop -------------------------------------------------------------------

@dataclass
class TrainResult:
    model: KTModel
    log: list = field(default_factory=list)
    best_epoch: int = 0
    best_valid_auc: float = float("nan")


def _param_norms(model):
    return {name: float(p.detach().norm()) for name, p in model.named_parameters()}


def train(model: KTModel, train_seqs: Sequence[LearnerSequence],
          valid_seqs: Sequence[LearnerSequence], config: TrainConfig,
          log_path=None) -> TrainResult:
    """Adam on BCE + lambda * load-balance loss, keeping the best-validation-AUC weights."""
    train_ids = {s.learner_id for s in train_seqs}
    overlap = train_ids & {s.learner_id for s in valid_seqs}
    if overlap:
        raise ValidationError(f"train and validation share learners {sorted(overlap)[:5]}")
    if not train_seqs or not valid_seqs:
        raise ValidationError("train and validation sets must be non-empty")

    torch.manual_seed(config.seed)
    noise = torch.Generator().manual_seed(config.seed)
    order_rng = np.random.default_rng(config.seed)
    optimizer = torch.optim.Adam(model.parameters(), lr=config.learning_rate,
                                 betas=(config.beta1, config.beta2), eps=config.eps)
    train_seqs = list(train_seqs)
    result = TrainResult(model)
    best_state = copy.deepcopy(model.state_dict())
    stale = 0
    log_fh = Path(log_path).open("w", encoding="utf-8") if log_path else None
    try:
        for epoch in range(1, config.epochs + 1):
            model.train()
            sums = np.zeros(3)
            steps = 0
            counts = np.zeros(STAGE_COUNT)
            order = order_rng.permutation(len(train_seqs))
            for b, chunk in enumerate(iter_batches([train_seqs[i] for i in order],
                                                   config.batch_size)):
                batch = Batch.from_sequences(chunk)
                out = model.run(batch, generator=noise)
                kt = kt_loss(out.probs, batch.responses, batch.mask)
                loss = total_loss(kt, out.lb_loss, config.lambda_lb)
                if not torch.isfinite(loss):
                    raise NumericError(
                        f"non-finite loss at epoch {epoch}, batch {b}; "
                        f"parameter norms: {_param_norms(model)}")
                optimizer.zero_grad()
                loss.backward()
                optimizer.step()
                n = int(batch.mask.sum())
                sums += n * np.array([loss.item(), kt.item(), out.lb_loss.item()])
                steps += n
                if model.routed:
                    counts += np.bincount(out.routing.selected[batch.mask].numpy(),
                                          minlength=STAGE_COUNT)[:STAGE_COUNT]
            valid = evaluate(model, valid_seqs)
            entry = {
                "epoch": epoch,
                "train_loss": sums[0] / steps,
                "train_kt": sums[1] / steps,
                "train_lb": sums[2] / steps,
                "train_routing_shares": (counts / counts.sum()).tolist() if model.routed else None,
                "valid_auc": valid.auc,
                "valid_bce": valid.bce,
                "valid_routing_shares": valid.routing_shares,
            }
            result.log.append(entry)
            if log_fh:
                log_fh.write(json.dumps(entry, sort_keys=True) + "\n")
            logger.debug("epoch %d: %s", epoch, entry)
            if valid.auc > result.best_valid_auc or epoch == 1:
                result.best_valid_auc = valid.auc
                result.best_epoch = epoch
                best_state = copy.deepcopy(model.state_dict())
                stale = 0
            else:
                stale += 1
                if stale >= config.patience:
                    break
    finally:
        if log_fh:
            log_fh.close()
    model.load_state_dict(best_state)
    model.eval()
    return result


# --- gradient checks -----------------------------------------------------------------

def numeric_gradient(loss_fn: Callable[[torch.Tensor], torch.Tensor], params: torch.Tensor,
                     step: float = 1e-4) -> torch.Tensor:
    params = params.detach().to(torch.float64)
    grad = torch.empty_like(params)
    with torch.no_grad():
        for i in range(params.numel()):
            orig = params[i].item()
            params[i] = orig + step
            up = float(loss_fn(params))
            params[i] = orig - step
            down = float(loss_fn(params))
            params[i] = orig
            grad[i] = (up - down) / (2 * step)
    return grad


def analytic_gradient(loss_fn, params: torch.Tensor) -> torch.Tensor:
    p = params.detach().to(torch.float64).clone().requires_grad_(True)
    (g,) = torch.autograd.grad(loss_fn(p), p, allow_unused=True)
    return torch.zeros_like(p) if g is None else g


def relative_errors(analytic, numeric):
    a, n = analytic.abs(), numeric.abs()
    return (analytic - numeric).abs() / torch.maximum(torch.ones_like(a), torch.maximum(a, n))


def grad_check(loss_fn, params: torch.Tensor, step: float = 1e-4) -> float:
    """Max over coordinates of |g_a - g_n| / max(1, |g_a|, |g_n|), central differences."""
    return float(relative_errors(analytic_gradient(loss_fn, params),
                                 numeric_gradient(loss_fn, params, step)).max())


@dataclass
class GradCheckReport:
    max_rel_error: float
    per_param: dict          # name -> max relative error
    analytic: dict           # name -> analytic gradient tensor
    numeric: dict
    routes: torch.Tensor
    attempts: int


def model_loss_fn(model: KTModel, batch: Batch, routes: torch.Tensor, lambda_lb: float):
    """Total loss as a function of one flat float64 parameter vector."""
    names = [n for n, _ in model.named_parameters()]
    shapes = [p.shape for _, p in model.named_parameters()]
    sizes = [p.numel() for _, p in model.named_parameters()]

    def unflatten(vec):
        return {n: chunk.view(s) for n, s, chunk in zip(names, shapes, torch.split(vec, sizes))}

    def loss_fn(vec):
        out = functional_call(model, unflatten(vec),
                              (batch.items, batch.responses, batch.mask), {"routes": routes})
        kt = kt_loss(out.probs, batch.responses, batch.mask)
        return total_loss(kt, out.lb_loss, lambda_lb)

    return loss_fn, unflatten


def model_grad_check(model: KTModel, make_batch: Callable[[int], Batch],
                     lambda_lb: float = 0.01, step: float = 1e-4,
                     margin: float = 1e-3, max_tries: int = 5) -> GradCheckReport:
    """Finite-difference check of the whole network with routing and dropout frozen.

    Runs in float64 and eval mode (no dropout, no logit noise). The selected
    stages are computed once and then forced. If any step sits within
    ``margin`` of a routing decision boundary the batch is re-drawn with
    ``make_batch(attempt)``.
    """
    net = copy.deepcopy(model).double().eval()
    for attempt in range(max_tries):
        batch = make_batch(attempt)
        with torch.no_grad():
            out = net.run(batch)
        routes = out.routing.selected if net.routed else None
        if net.routed and net.config.forced_stage is None:
            top2 = out.routing.clean_logits.topk(2, dim=-1).values
            gaps = (top2[..., 0] - top2[..., 1])[batch.mask]
            if float(gaps.min()) < margin:
                logger.info("grad check attempt %d hit a routing boundary; resampling", attempt)
                continue
        break
    else:
        raise NumericError(f"routing boundary persisted over {max_tries} resampled batches")

    loss_fn, unflatten = model_loss_fn(net, batch, routes, lambda_lb)
    vec = torch.cat([p.detach().reshape(-1) for p in net.parameters()])
    ga = analytic_gradient(loss_fn, vec)
    gn = numeric_gradient(loss_fn, vec, step)
    rel = relative_errors(ga, gn)
    rel_named = unflatten(rel)
    return GradCheckReport(
        max_rel_error=float(rel.max()),
        per_param={k: float(v.max()) for k, v in rel_named.items()},
        analytic=unflatten(ga),
        numeric=unflatten(gn),
        routes=routes,
        attempts=attempt + 1,
    )
