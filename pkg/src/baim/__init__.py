"""Behavior-aware item modeling for knowledge tracing.

Items are represented by four problem-solving stage embeddings taken from a
solver model's hidden states; a learner-conditioned Top-1 router picks one
stage per interaction and feeds it to a standard knowledge-tracing backbone.
"""

from .data import (DEFAULT_MAX_LEN, STAGE_COUNT, Interaction, ItemCatalog, LearnerSequence,
                   SimulatorConfig, load_sequences, make_folds, simulate_population,
                   write_sequences)
from .embedding import (HiddenStateDump, StageEmbeddingTable, build_table, fit_pca,
                        load_table, read_dumps, save_table, write_dumps)
from .estimator import BAIMKnowledgeTracer, StageEmbedder, StagePCA
from .exceptions import BaimError, ConfigError, NumericError, ParseError, ValidationError
from .model import KTModel, ModelConfig
from .router import BAIMRouter, RouterConfig
from .backbones import BackboneConfig
from .training import TrainConfig, auc, evaluate, train

__version__ = "0.1.0"

__all__ = [
    "DEFAULT_MAX_LEN", "STAGE_COUNT", "Interaction", "ItemCatalog", "LearnerSequence",
    "SimulatorConfig", "load_sequences", "make_folds", "simulate_population",
    "write_sequences", "HiddenStateDump", "StageEmbeddingTable", "build_table", "fit_pca",
    "load_table", "read_dumps", "save_table", "write_dumps", "BAIMKnowledgeTracer",
    "StageEmbedder", "StagePCA", "BaimError", "ConfigError", "NumericError", "ParseError",
    "ValidationError", "KTModel", "ModelConfig", "BAIMRouter", "RouterConfig",
    "BackboneConfig", "TrainConfig", "auc", "evaluate", "train",
]
