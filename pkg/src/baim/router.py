"""Context-conditioned Top-1 stage routing.

For the item at step t the router

1. projects the item's four stage embeddings into a solution vector ``s_t``,
2. updates a GRU learner context ``m_t`` from the previous solution vector
   and the previous response,
3. scores the four stages from ``s_t`` and ``m_t`` (plus Gaussian logit
   noise while training) and keeps the arg-max stage,
4. runs the selected stage embedding through that stage's expert MLP and a
   shared LayerNorm.

The stage embedding table is a trainable parameter initialised from the
offline embedding pipeline.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .data import STAGE_COUNT
from .exceptions import ValidationError

RESPONSE_START = 2


@dataclass(frozen=True)
class RouterConfig:
    d_input: int = 768
    d_kt: int = 256
    d_history: int = 64
    dropout: float = 0.1
    noise_std: float = 0.25
    scale_by_gate_prob: bool = False

    def __post_init__(self):
        for name in ("d_input", "d_kt", "d_history"):
            if getattr(self, name) < 1:
                raise ValidationError(f"{name} must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ValidationError("dropout must lie in [0, 1)")
        if self.noise_std < 0:
            raise ValidationError("noise_std must be non-negative")


@dataclass
class RoutingTraceEntry:
    timestep: int
    clean_logits: np.ndarray
    noisy_logits: np.ndarray | None
    probabilities: np.ndarray
    selected: int
    training: bool


@dataclass
class RouterOutput:
    item_repr: torch.Tensor                  # (B, T, d_kt)
    clean_logits: torch.Tensor | None = None  # (B, T, 4)
    noisy_logits: torch.Tensor | None = None
    probs: torch.Tensor | None = None         # softmax of the logits used for selection
    selected: torch.Tensor | None = None      # (B, T) long
    context: torch.Tensor | None = None       # (B, T, d_history)

    @property
    def routed(self) -> bool:
        return self.selected is not None


def _uniform_fan_in_(module: nn.Module) -> None:
    for name, param in module.named_parameters(recurse=False):
        fan_in = param.shape[-1] if param.dim() > 1 else module.weight.shape[-1]
        bound = 1.0 / np.sqrt(fan_in)
        nn.init.uniform_(param, -bound, bound)


class StageExpert(nn.Module):
    def __init__(self, d_input, d_kt, dropout):
        super().__init__()
        self.hidden = nn.Linear(d_input, d_input)
        self.drop = nn.Dropout(dropout)
        self.out = nn.Linear(d_input, d_kt)

    def forward(self, x):
        return self.out(self.drop(F.relu(self.hidden(x))))


class BAIMRouter(nn.Module):
    """Learner-conditioned item representations from stage embeddings."""

    def __init__(self, config: RouterConfig, item_count: int, table=None):
        super().__init__()
        self.config = config
        self.item_count = item_count
        if table is None:
            init = torch.randn(item_count, STAGE_COUNT, config.d_input)
        else:
            init = torch.as_tensor(np.asarray(table), dtype=torch.get_default_dtype())
            if tuple(init.shape) != (item_count, STAGE_COUNT, config.d_input):
                raise ValidationError(
                    f"stage table shape {tuple(init.shape)} does not match "
                    f"({item_count}, 4, {config.d_input})")
        self.table = nn.Parameter(init.clone())

        d_kt, d_h = config.d_kt, config.d_history
        self.proj = nn.Linear(STAGE_COUNT * config.d_input, d_kt)
        self.proj_drop = nn.Dropout(config.dropout)
        self.w_in = nn.Linear(2 * d_kt, d_h, bias=False)
        self.gru = nn.GRU(d_h, d_h, batch_first=True)
        self.response_table = nn.Embedding(3, d_kt)
        self.gate_layer = nn.Linear(d_kt + d_h, STAGE_COUNT)
        self.experts = nn.ModuleList(
            StageExpert(config.d_input, d_kt, config.dropout) for _ in range(STAGE_COUNT))
        self.norm = nn.LayerNorm(d_kt)

        for mod in (self.proj, self.w_in, self.gate_layer, self.gru,
                    *(lin for e in self.experts for lin in (e.hidden, e.out))):
            if isinstance(mod, nn.GRU):
                continue  # torch default is already U(+-1/sqrt(hidden))
            _uniform_fan_in_(mod)
        nn.init.uniform_(self.response_table.weight, -1.0, 1.0)

    # -- single operations --------------------------------------------------------

    def encode_solution(self, stage_vectors: torch.Tensor) -> torch.Tensor:
        """(..., 4, d_input) -> (..., d_kt)."""
        if stage_vectors.shape[-2:] != (STAGE_COUNT, self.config.d_input):
            raise ValidationError(
                f"expected (..., 4, {self.config.d_input}) stage vectors, "
                f"got {tuple(stage_vectors.shape)}")
        flat = stage_vectors.reshape(*stage_vectors.shape[:-2], -1)
        return self.proj_drop(F.relu(self.proj(flat)))

    def context_input(self, s_prev: torch.Tensor, r_prev: torch.Tensor) -> torch.Tensor:
        return self.w_in(torch.cat([s_prev, self.response_table(r_prev)], dim=-1))

    def update_context(self, m_prev: torch.Tensor, s_prev: torch.Tensor,
                       r_prev) -> torch.Tensor:
        """One GRU step; ``r_prev`` is 0, 1 or ``RESPONSE_START``."""
        if m_prev.shape[-1] != self.config.d_history or s_prev.shape[-1] != self.config.d_kt:
            raise ValidationError("context or solution width does not match the config")
        r_prev = torch.as_tensor(r_prev, dtype=torch.long)
        x = self.context_input(s_prev, r_prev)
        squeeze = x.dim() == 1
        if squeeze:
            x, m_prev = x.unsqueeze(0), m_prev.unsqueeze(0)
        g = self.gru
        m = torch.gru_cell(x, m_prev, g.weight_ih_l0, g.weight_hh_l0, g.bias_ih_l0, g.bias_hh_l0)
        return m.squeeze(0) if squeeze else m

    def gate_logits(self, s: torch.Tensor, m: torch.Tensor) -> torch.Tensor:
        return self.gate_layer(torch.cat([s, m], dim=-1))

    def select(self, clean: torch.Tensor, generator: torch.Generator | None = None):
        """Returns (noisy logits or None, probabilities, selected stage)."""
        noisy = None
        logits = clean
        if self.training and self.config.noise_std > 0:
            eps = torch.randn(clean.shape, generator=generator, dtype=clean.dtype)
            noisy = clean + self.config.noise_std * eps
            logits = noisy
        probs = torch.softmax(logits, dim=-1)
        # torch.argmax returns the first maximal index, i.e. ties go to the lowest stage
        return noisy, probs, torch.argmax(logits, dim=-1)

    def gate(self, s, m, generator=None, timestep: int = 0) -> RoutingTraceEntry:
        clean = self.gate_logits(s, m)
        noisy, probs, k = self.select(clean, generator)
        return RoutingTraceEntry(
            timestep=timestep,
            clean_logits=clean.detach().cpu().numpy(),
            noisy_logits=None if noisy is None else noisy.detach().cpu().numpy(),
            probabilities=probs.detach().cpu().numpy(),
            selected=int(k),
            training=self.training,
        )

    def expert_transform(self, stage_vector: torch.Tensor, k: int) -> torch.Tensor:
        if k not in range(STAGE_COUNT):
            raise ValidationError(f"stage index {k} outside 0..3")
        return self.norm(self.experts[k](stage_vector))

    def route_item(self, item_id: int, m: torch.Tensor, generator=None, timestep: int = 0):
        """Route one item under learner context ``m``; returns (item_repr, trace entry)."""
        if not 0 <= item_id < self.item_count:
            raise ValidationError(f"item {item_id} not in the stage table")
        stages = self.table[item_id]
        s = self.encode_solution(stages)
        entry = self.gate(s, m, generator, timestep)
        return self.expert_transform(stages[entry.selected], entry.selected), entry

    # -- batched sequence forward -------------------------------------------------

    def forward(self, items: torch.Tensor, responses: torch.Tensor,
                routes: torch.Tensor | None = None,
                generator: torch.Generator | None = None) -> RouterOutput:
        """Route every step of a padded (B, T) batch.

        The context at step t is the GRU state after consuming steps < t; step 0
        consumes a zero solution vector and the start-of-sequence response row.
        ``routes`` forces the selected stage (fixed-stage ablations, gradient checks).
        """
        if items.max() >= self.item_count or items.min() < 0:
            raise ValidationError("item id outside the stage table")
        B, T = items.shape
        stages = self.table[items]                                  # (B, T, 4, d_in)
        s = self.encode_solution(stages)                            # (B, T, d_kt)
        s_prev = torch.cat([s.new_zeros(B, 1, s.shape[-1]), s[:, :-1]], dim=1)
        r_prev = torch.cat([responses.new_full((B, 1), RESPONSE_START), responses[:, :-1]], dim=1)
        h0 = s.new_zeros(1, B, self.config.d_history)
        m, _ = self.gru(self.context_input(s_prev, r_prev), h0)     # (B, T, d_h)

        clean = self.gate_logits(s, m)
        noisy, probs, selected = self.select(clean, generator)
        if routes is not None:
            selected = routes.to(torch.long).expand(B, T)

        expert_out = torch.stack(
            [self.experts[p](stages[:, :, p]) for p in range(STAGE_COUNT)], dim=2)
        idx = selected[..., None, None].expand(B, T, 1, expert_out.shape[-1])
        item_repr = self.norm(expert_out.gather(2, idx).squeeze(2))
        if self.config.scale_by_gate_prob:
            item_repr = item_repr * probs.gather(-1, selected[..., None])
        return RouterOutput(item_repr, clean, noisy, probs, selected, m)


def load_balance_stats(probs, mask=None):
    """Batch-mean routing probabilities and the squared-deviation-from-uniform loss.

    ``probs`` is (..., 4); ``mask`` flags valid entries. Returns (p_bar, loss).
    """
    probs = torch.as_tensor(probs)
    flat = probs.reshape(-1, STAGE_COUNT)
    if mask is None:
        valid = flat
    else:
        keep = torch.as_tensor(mask, dtype=torch.bool).reshape(-1)
        valid = flat[keep]
    if valid.shape[0] == 0:
        raise ValidationError("load-balance statistics need at least one valid entry")
    p_bar = valid.mean(dim=0)
    return p_bar, ((p_bar - 1.0 / STAGE_COUNT) ** 2).sum()
