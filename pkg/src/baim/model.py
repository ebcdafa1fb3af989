"""Item-representation module plus KT backbone as one trainable network."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .backbones import BackboneConfig, StaticItemEncoder, make_backbone
from .data import STAGE_COUNT, LearnerSequence
from .exceptions import ConfigError, ValidationError
from .router import BAIMRouter, RouterConfig, RouterOutput, load_balance_stats

ITEM_REPR_MODES = ("baim", "static")
ROUTINGS = ("adaptive", "fixed-0", "fixed-1", "fixed-2", "fixed-3", "holistic")


@dataclass(frozen=True)
class ModelConfig:
    item_count: int
    item_repr_mode: str = "baim"
    routing: str = "adaptive"
    router: RouterConfig = field(default_factory=RouterConfig)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)

    def __post_init__(self):
        if self.item_count < 1:
            raise ValidationError("item_count must be positive")
        if self.item_repr_mode not in ITEM_REPR_MODES:
            raise ValidationError(f"item_repr_mode must be one of {ITEM_REPR_MODES}")
        if self.routing not in ROUTINGS:
            raise ValidationError(f"routing must be one of {ROUTINGS}")
        if self.router.d_kt != self.backbone.d_kt:
            raise ConfigError("router and backbone disagree on d_kt")

    @property
    def forced_stage(self) -> int | None:
        if self.routing.startswith("fixed-"):
            return int(self.routing[-1])
        if self.routing == "holistic":
            return 0  # all four slots hold the same holistic vector
        return None

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "ModelConfig":
        doc = dict(doc)
        doc["router"] = RouterConfig(**doc.get("router", {}))
        doc["backbone"] = BackboneConfig(**doc.get("backbone", {}))
        return cls(**doc)

    def config_hash(self) -> str:
        payload = json.dumps(self.to_dict(), sort_keys=True)
        return hashlib.sha256(payload.encode()).hexdigest()


@dataclass
class Batch:
    items: torch.Tensor       # (B, T) long, right padded with 0
    responses: torch.Tensor   # (B, T) long
    mask: torch.Tensor        # (B, T) bool
    learner_ids: list

    @classmethod
    def from_sequences(cls, sequences: Sequence[LearnerSequence]) -> "Batch":
        if not sequences:
            raise ValidationError("empty batch")
        T = max(len(s) for s in sequences)
        items = np.zeros((len(sequences), T), dtype=np.int64)
        responses = np.zeros_like(items)
        mask = np.zeros(items.shape, dtype=bool)
        for b, s in enumerate(sequences):
            n = len(s)
            items[b, :n] = s.items
            responses[b, :n] = s.responses
            mask[b, :n] = True
        return cls(torch.from_numpy(items), torch.from_numpy(responses),
                   torch.from_numpy(mask), [s.learner_id for s in sequences])


@dataclass
class ModelOutput:
    logits: torch.Tensor
    routing: RouterOutput
    lb_loss: torch.Tensor
    p_bar: torch.Tensor | None

    @property
    def probs(self) -> torch.Tensor:
        return torch.sigmoid(self.logits)


class KTModel(nn.Module):
    def __init__(self, config: ModelConfig, table=None):
        super().__init__()
        self.config = config
        if config.item_repr_mode == "baim":
            self.items = BAIMRouter(config.router, config.item_count, table)
        else:
            self.items = StaticItemEncoder(config.item_count, config.backbone.d_kt)
        self.backbone = make_backbone(config.backbone)

    @property
    def routed(self) -> bool:
        return self.config.item_repr_mode == "baim"

    def forward(self, items, responses, mask=None, routes=None,
                generator: torch.Generator | None = None) -> ModelOutput:
        if mask is None:
            mask = torch.ones(items.shape, dtype=torch.bool)
        forced = self.config.forced_stage
        if routes is None and forced is not None:
            routes = torch.tensor(forced)
        if self.routed:
            out = self.items(items, responses, routes=routes, generator=generator)
        else:
            out = self.items(items, responses)
        logits = self.backbone(out.item_repr, responses, mask)
        if self.routed and forced is None:
            p_bar, lb = load_balance_stats(out.probs, mask)
        else:
            p_bar, lb = None, logits.new_zeros(())
        return ModelOutput(logits, out, lb, p_bar)

    def run(self, batch: Batch, routes=None, generator=None) -> ModelOutput:
        return self(batch.items, batch.responses, batch.mask, routes=routes, generator=generator)


def routing_shares(selected: torch.Tensor, mask: torch.Tensor) -> np.ndarray:
    """Fraction of valid steps routed to each stage."""
    chosen = selected[mask].cpu().numpy()
    if len(chosen) == 0:
        raise ValidationError("no valid steps")
    return np.bincount(chosen, minlength=STAGE_COUNT)[:STAGE_COUNT] / len(chosen)
