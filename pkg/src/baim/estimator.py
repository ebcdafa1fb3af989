"""scikit-learn style front ends.

``StagePCA`` and ``StageEmbedder`` are transformers over pooled vectors and
hidden-state dumps; ``BAIMKnowledgeTracer`` wraps the network and its
training loop behind ``fit`` / ``predict_proba`` / ``score``.
"""

from __future__ import annotations

import warnings

import numpy as np
import torch
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .backbones import BackboneConfig
from .checkpoint import load_checkpoint, save_checkpoint
from .embedding import apply_pca, build_table, fit_pca, stage_vectors
from .exceptions import ValidationError
from .model import KTModel, ModelConfig
from .router import RouterConfig
from .training import TrainConfig, auc, evaluate, trace_sequences, train
from .validation import check_dumps, check_matrix, check_sequences, check_stage_table


class StagePCA(TransformerMixin, BaseEstimator):
    """Centred PCA to a fixed output width (zero padded past the data rank)."""

    def __init__(self, n_components=768):
        self.n_components = n_components

    def fit(self, X, y=None):
        X = check_matrix(X, min_rows=2)
        self.model_ = fit_pca(X, self.n_components)
        self.mean_ = self.model_.mean
        self.components_ = self.model_.components
        self.explained_variance_ = self.model_.explained_variance
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self, "model_")
        return apply_pca(self.model_, check_matrix(X))

    def inverse_transform(self, Z):
        check_is_fitted(self, "model_")
        Z = np.asarray(Z, dtype=np.float64)[:, : self.model_.n_components]
        return Z @ self.components_ + self.mean_


class StageEmbedder(TransformerMixin, BaseEstimator):
    """Hidden-state dumps -> (items, 4, target_dim) stage embeddings."""

    def __init__(self, target_dim=768, strategy="global"):
        self.target_dim = target_dim
        self.strategy = strategy

    def fit(self, dumps, y=None):
        dumps = check_dumps(dumps)
        self.table_ = build_table(dumps, self.target_dim, self.strategy)
        self.pca_ = self.table_.pca
        return self

    def transform(self, dumps):
        check_is_fitted(self, "pca_")
        dumps = sorted(check_dumps(dumps), key=lambda d: d.item_id)
        pooled = np.stack([stage_vectors(d, self.strategy) for d in dumps])
        return apply_pca(self.pca_, pooled)

    def fit_transform(self, dumps, y=None):
        return self.fit(dumps).table_.matrix


class BAIMKnowledgeTracer(BaseEstimator):
    """Item-level knowledge tracer with context-conditioned stage routing.

    ``X`` is a list of ``LearnerSequence`` (labels live inside the sequences,
    so ``y`` is ignored). ``item_repr_mode="static"`` swaps the router for a
    randomly initialised item embedding table, the usual baseline.
    """

    def __init__(self, backbone="recurrent", item_repr_mode="baim", routing="adaptive",
                 d_kt=256, d_history=64, hidden=None, n_heads=4, max_len=200,
                 dropout=0.1, noise_std=0.25, scale_by_gate_prob=False,
                 lambda_lb=0.01, learning_rate=1e-4, batch_size=128, epochs=200,
                 patience=10, validation_fraction=0.2, random_state=42):
        self.backbone = backbone
        self.item_repr_mode = item_repr_mode
        self.routing = routing
        self.d_kt = d_kt
        self.d_history = d_history
        self.hidden = hidden
        self.n_heads = n_heads
        self.max_len = max_len
        self.dropout = dropout
        self.noise_std = noise_std
        self.scale_by_gate_prob = scale_by_gate_prob
        self.lambda_lb = lambda_lb
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.epochs = epochs
        self.patience = patience
        self.validation_fraction = validation_fraction
        self.random_state = random_state

    def _model_config(self, item_count, d_input):
        router = RouterConfig(d_input=d_input, d_kt=self.d_kt, d_history=self.d_history,
                              dropout=self.dropout, noise_std=self.noise_std,
                              scale_by_gate_prob=self.scale_by_gate_prob)
        backbone = BackboneConfig(kind=self.backbone, d_kt=self.d_kt,
                                  hidden=self.hidden or self.d_kt, n_heads=self.n_heads,
                                  max_len=self.max_len, dropout=self.dropout)
        return ModelConfig(item_count, self.item_repr_mode, self.routing, router, backbone)

    def train_config(self) -> TrainConfig:
        return TrainConfig(batch_size=self.batch_size, learning_rate=self.learning_rate,
                           epochs=self.epochs, lambda_lb=self.lambda_lb,
                           seed=self.random_state, patience=self.patience)

    def _holdout(self, X):
        ids = sorted({s.learner_id for s in X})
        n_valid = max(1, int(round(self.validation_fraction * len(ids))))
        if n_valid >= len(ids):
            raise ValidationError("need at least two learners to hold out a validation set")
        rng = np.random.default_rng(self.random_state)
        valid_ids = set(rng.choice(ids, size=n_valid, replace=False).tolist())
        return ([s for s in X if s.learner_id not in valid_ids],
                [s for s in X if s.learner_id in valid_ids])

    def fit(self, X, y=None, *, stage_table=None, item_count=None, eval_set=None,
            log_path=None):
        X = check_sequences(X)
        table = None
        if self.item_repr_mode == "baim":
            if stage_table is None:
                raise ValidationError("BAIM mode needs a stage embedding table")
            table = check_stage_table(stage_table, item_count)
            item_count = table.shape[0]
            d_input = table.shape[2]
        else:
            if stage_table is not None:
                warnings.warn("static item representations ignore the stage table",
                              UserWarning, stacklevel=2)
            d_input = 1
        if item_count is None:
            item_count = 1 + max(int(s.items.max()) for s in X)
        X = check_sequences(X, item_count)
        if eval_set is None:
            train_seqs, valid_seqs = self._holdout(X)
        else:
            train_seqs, valid_seqs = X, check_sequences(eval_set, item_count)

        config = self._model_config(item_count, d_input)
        torch.manual_seed(self.random_state)
        model = KTModel(config, table)
        result = train(model, train_seqs, valid_seqs, self.train_config(), log_path=log_path)
        self.model_ = result.model
        self.config_ = config
        self.history_ = result.log
        self.best_epoch_ = result.best_epoch
        self.n_items_ = item_count
        return self

    def predict_proba(self, X):
        """Per-step probabilities of a correct response, one array per sequence."""
        check_is_fitted(self, "model_")
        return [t.y for t in trace_sequences(self.model_, check_sequences(X, self.n_items_))]

    def predict(self, X, threshold=0.5):
        return [(p >= threshold).astype(np.int64) for p in self.predict_proba(X)]

    def score(self, X, y=None):
        """Pooled AUC over every step of every sequence."""
        X = check_sequences(X, self.n_items_)
        probs = np.concatenate(self.predict_proba(X))
        return auc(probs, np.concatenate([s.responses for s in X]))

    def evaluate(self, X):
        check_is_fitted(self, "model_")
        return evaluate(self.model_, check_sequences(X, self.n_items_))

    def routing_trace(self, X):
        check_is_fitted(self, "model_")
        if not self.model_.routed:
            raise ValidationError("static item representations have no routing trace")
        return trace_sequences(self.model_, check_sequences(X, self.n_items_))

    def save(self, path, metadata=None):
        check_is_fitted(self, "model_")
        meta = {"estimator_params": self.get_params(), "best_epoch": self.best_epoch_,
                "seed": self.random_state}
        meta.update(metadata or {})
        return save_checkpoint(path, self.model_, meta)

    @classmethod
    def load(cls, path, expected_config=None):
        model, meta = load_checkpoint(path, expected_config)
        est = cls(**meta.get("estimator_params", {}))
        est.model_ = model
        est.config_ = model.config
        est.history_ = []
        est.best_epoch_ = meta.get("best_epoch", 0)
        est.n_items_ = model.config.item_count
        est.metadata_ = meta
        return est

