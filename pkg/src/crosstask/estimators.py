"""scikit-learn style estimator facade.

Wraps a model family plus its training harness behind ``fit`` /
``predict_proba`` / ``get_params`` so the algorithms compose with the wider
ecosystem (``sklearn.base.clone``, pipelines, external model selection).
Inputs are validated and coerced to the package's batch type; ``X`` may be
``[n, features]`` (single-step) or ``[n, steps, features]``.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator

from .data import DatasetSplit
from .errors import ConfigError, DimensionError
from .model import EpisodeBatch, ModelConfig
from .rng import RngStream
from .train import TrainConfig, fit as fit_model
from .variants import VariantSpec, build


def validate_sequence_input(X, num_features: int | None = None) -> np.ndarray:
    """Coerce to a finite float [n, steps, features] array."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 2:
        X = X[:, None, :]
    if X.ndim != 3:
        raise DimensionError(
            f"X must be [n, features] or [n, steps, features], got {X.shape}")
    if X.shape[0] == 0:
        raise DimensionError("X has no instances")
    if not np.isfinite(X).all():
        raise ConfigError("X contains non-finite values; impute before fitting")
    if num_features is not None and X.shape[2] != num_features:
        raise DimensionError(
            f"X has {X.shape[2]} features, expected {num_features}")
    return X


def validate_targets(y, label_mask, n: int):
    y = np.asarray(y, dtype=np.float64)
    if y.ndim == 1:
        y = y[:, None]
    if y.ndim != 2 or y.shape[0] != n:
        raise DimensionError(f"y must be [n, tasks], got {y.shape}")
    if label_mask is None:
        label_mask = np.ones_like(y, dtype=bool)
    else:
        label_mask = np.asarray(label_mask, dtype=bool)
        if label_mask.shape != y.shape:
            raise DimensionError("label_mask must match y's shape")
    if not np.isin(y[label_mask], (0.0, 1.0)).all():
        raise ConfigError("labels must be binary where masked in")
    return y, label_mask


class MultiTaskSequenceClassifier(BaseEstimator):
    """Multi-task sequence classifier with selectable family.

    Parameters mirror the model/training configs; see
    :class:`~crosstask.model.ModelConfig` and
    :class:`~crosstask.train.TrainConfig`.  ``family`` picks the variant
    ("tp_amtl", "p_amtl", "td_amtl", "amtl_loss", "stl", "mtl",
    "mtl_kendall").
    """

    def __init__(self, family="tp_amtl", hidden_size=16, embed_layers=2,
                 dropout_rate=0.1, mc_samples=8, uncertainty_mode="both",
                 transfer_mode="full", leaky_relu_slope=0.2,
                 mean_activation="leaky_relu", gate_output="sigmoid",
                 learning_rate=0.001, batch_size=64, l2_coefficient=0.0002,
                 patience=10, max_epochs=30, max_iterations=100_000,
                 validation_fraction=0.2, seed=0):
        self.family = family
        self.hidden_size = hidden_size
        self.embed_layers = embed_layers
        self.dropout_rate = dropout_rate
        self.mc_samples = mc_samples
        self.uncertainty_mode = uncertainty_mode
        self.transfer_mode = transfer_mode
        self.leaky_relu_slope = leaky_relu_slope
        self.mean_activation = mean_activation
        self.gate_output = gate_output
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.l2_coefficient = l2_coefficient
        self.patience = patience
        self.max_epochs = max_epochs
        self.max_iterations = max_iterations
        self.validation_fraction = validation_fraction
        self.seed = seed

    # -- sklearn surface -----------------------------------------------------

    def fit(self, X, y, label_mask=None):
        X = validate_sequence_input(X)
        y, label_mask = validate_targets(y, label_mask, X.shape[0])
        if not 0.0 < self.validation_fraction < 0.5:
            raise ConfigError("validation_fraction must lie in (0, 0.5)")
        n = X.shape[0]
        n_valid = max(1, int(round(self.validation_fraction * n)))
        if n - n_valid < 1:
            raise ConfigError("not enough instances for a validation split")
        order = RngStream(self.seed).child("estimator.split").permutation(n)
        valid_rows = order[:n_valid]
        train_rows = order[n_valid:]
        counts = np.full(n, X.shape[1])
        batch = EpisodeBatch(X, y, label_mask, counts)
        # the held-out slice doubles as the (unused) test set
        fractions = (1 - self.validation_fraction,
                     self.validation_fraction / 2,
                     self.validation_fraction / 2)
        split = DatasetSplit(batch.select(train_rows),
                             batch.select(valid_rows),
                             batch.select(valid_rows), fractions, self.seed)
        self.num_tasks_ = y.shape[1]
        self.num_features_ = X.shape[2]
        config = ModelConfig(
            num_tasks=self.num_tasks_, num_features=self.num_features_,
            hidden_size=self.hidden_size, embed_layers=self.embed_layers,
            dropout_rate=self.dropout_rate, mc_samples=self.mc_samples,
            uncertainty_mode=self.uncertainty_mode,
            transfer_mode=self.transfer_mode,
            leaky_relu_slope=self.leaky_relu_slope,
            mean_activation=self.mean_activation, gate_output=self.gate_output)
        train_config = TrainConfig(
            learning_rate=self.learning_rate, batch_size=self.batch_size,
            max_iterations=self.max_iterations,
            l2_coefficient=self.l2_coefficient, patience=self.patience,
            max_epochs=self.max_epochs)
        self.model_ = build(VariantSpec(self.family), config, seed=self.seed)
        self.record_ = fit_model(self.model_, split, train_config,
                                 seed=self.seed)
        return self

    def _require_fitted(self):
        if not hasattr(self, "model_"):
            raise ConfigError("estimator is not fitted; call fit first")

    def predict_proba(self, X) -> np.ndarray:
        self._require_fitted()
        X = validate_sequence_input(X, self.num_features_)
        return self.model_.predict_proba(X)

    def predict(self, X) -> np.ndarray:
        return (self.predict_proba(X) >= 0.5).astype(int)

    def export_transfer_graph(self, X):
        self._require_fitted()
        X = validate_sequence_input(X, self.num_features_)
        return self.model_.export_transfer_graph(X)
