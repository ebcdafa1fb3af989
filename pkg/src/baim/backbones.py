"""Knowledge-tracing backbones that consume per-step item representations.

``RecurrentBackbone`` follows the qDKT recipe: interactions are embedded with
separate linear maps for correct and incorrect responses and fed to an LSTM;
the current item enters the prediction head through its own query map.

``AttentionBackbone`` follows simpleKT: interaction embeddings are the item
representation plus a response embedding, and the current item representation
is the query of a single causal attention block. Position t attends only to
positions strictly before it.

Both return logits of shape (B, T); ``y_t`` depends on the item
representation at t and on interactions 0..t-1 only.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .exceptions import ValidationError
from .router import RouterOutput

KINDS = ("recurrent", "attention")
_MASK_FILL = -1e9


@dataclass(frozen=True)
class BackboneConfig:
    kind: str = "recurrent"
    d_kt: int = 256
    hidden: int = 256
    n_heads: int = 4
    max_len: int = 200
    dropout: float = 0.1

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValidationError(f"unknown backbone kind {self.kind!r}")
        if min(self.d_kt, self.hidden, self.n_heads, self.max_len) < 1:
            raise ValidationError("backbone widths must be positive")
        if self.kind == "attention" and self.d_kt % self.n_heads:
            raise ValidationError("n_heads must divide d_kt")


def prediction_head(d_in, hidden, dropout):
    return nn.Sequential(nn.Linear(d_in, hidden), nn.ReLU(), nn.Dropout(dropout),
                         nn.Linear(hidden, 1))


def _check_aligned(item_repr, responses):
    if item_repr.shape[:2] != responses.shape:
        raise ValidationError(
            f"item representations {tuple(item_repr.shape[:2])} and responses "
            f"{tuple(responses.shape)} are not aligned")


class RecurrentBackbone(nn.Module):
    def __init__(self, config: BackboneConfig):
        super().__init__()
        self.config = config
        d = config.d_kt
        self.w_correct = nn.Linear(d, d)
        self.w_wrong = nn.Linear(d, d)
        self.query = nn.Linear(d, d)
        self.lstm = nn.LSTM(d, config.hidden, batch_first=True)
        self.head = prediction_head(config.hidden + d, config.hidden, config.dropout)

    def interaction_embed(self, item_repr, responses):
        correct = torch.as_tensor(responses, dtype=torch.bool).unsqueeze(-1)
        return torch.where(correct, self.w_correct(item_repr), self.w_wrong(item_repr))

    def forward(self, item_repr, responses, mask=None):
        _check_aligned(item_repr, responses)
        B = item_repr.shape[0]
        h, _ = self.lstm(self.interaction_embed(item_repr, responses))
        h_prev = torch.cat([h.new_zeros(B, 1, h.shape[-1]), h[:, :-1]], dim=1)
        return self.head(torch.cat([h_prev, self.query(item_repr)], dim=-1)).squeeze(-1)


class AttentionBackbone(nn.Module):
    def __init__(self, config: BackboneConfig):
        super().__init__()
        self.config = config
        d = config.d_kt
        self.response_embed = nn.Embedding(2, d)
        self.position = nn.Embedding(config.max_len, d)
        self.q_proj = nn.Linear(d, d)
        self.k_proj = nn.Linear(d, d)
        self.v_proj = nn.Linear(d, d)
        self.out_proj = nn.Linear(d, d)
        self.drop = nn.Dropout(config.dropout)
        self.head = prediction_head(2 * d, config.hidden, config.dropout)

    def interaction_embed(self, item_repr, responses):
        return item_repr + self.response_embed(torch.as_tensor(responses, dtype=torch.long))

    def attend(self, query, keys, values):
        """Multi-head attention of step t over steps < t, before the output map.

        Returns (context, has_history); rows without history are zero.
        """
        B, T, d = query.shape
        H = self.config.n_heads

        def split(x):
            return x.view(B, T, H, d // H).transpose(1, 2)

        q, k, v = split(self.q_proj(query)), split(self.k_proj(keys)), split(self.v_proj(values))
        scores = q @ k.transpose(-1, -2) / (d // H) ** 0.5
        allowed = torch.ones(T, T, dtype=torch.bool).tril(diagonal=-1)
        scores = scores.masked_fill(~allowed, _MASK_FILL)
        weights = torch.softmax(scores, dim=-1)
        has_history = allowed.any(dim=-1).to(weights.dtype)        # (T,)
        weights = weights * has_history[:, None]
        ctx = (weights @ v).transpose(1, 2).reshape(B, T, d)
        return ctx, has_history

    def forward(self, item_repr, responses, mask=None):
        _check_aligned(item_repr, responses)
        T = item_repr.shape[1]
        if T > self.config.max_len:
            raise ValidationError(f"sequence length {T} exceeds max_len {self.config.max_len}")
        pos = self.position(torch.arange(T))
        query = item_repr + pos
        inter = self.interaction_embed(item_repr, responses) + pos
        ctx, has_history = self.attend(query, inter, inter)
        ctx = self.drop(self.out_proj(ctx)) * has_history[None, :, None]
        return self.head(torch.cat([ctx, query], dim=-1)).squeeze(-1)


def make_backbone(config: BackboneConfig) -> nn.Module:
    return RecurrentBackbone(config) if config.kind == "recurrent" else AttentionBackbone(config)


class StaticItemEncoder(nn.Module):
    """Context-free item embeddings trained from random initialisation."""

    def __init__(self, item_count: int, d_kt: int):
        super().__init__()
        self.item_count = item_count
        self.embedding = nn.Embedding(item_count, d_kt)

    def static_item_repr(self, item_id: int) -> torch.Tensor:
        if not 0 <= item_id < self.item_count:
            raise ValidationError(f"item {item_id} not in catalog")
        return self.embedding.weight[item_id]

    def forward(self, items, responses=None, routes=None, generator=None):
        if items.max() >= self.item_count or items.min() < 0:
            raise ValidationError("item id outside the catalog")
        return RouterOutput(self.embedding(items))


def interaction_embed(backbone: nn.Module, item_repr, response):
    """Response-aware interaction embedding for either backbone kind."""
    if not torch.all((torch.as_tensor(response) == 0) | (torch.as_tensor(response) == 1)):
        raise ValidationError("response must be 0 or 1")
    return backbone.interaction_embed(item_repr, response)

