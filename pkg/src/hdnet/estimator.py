"""Scikit-learn estimator wrapper around the harmonization trainer.

X stacks composite and mask as [n, 4, H, W] (channels RGB + mask), y holds
the ground-truth images as [n, 3, H, W]. Values live in [0, 1] and the mask
channel must be exactly 0 or 1.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .autograd import DimensionError
from .data import CompositeSample
from .metrics import psnr
from .model import Mask
from .train import TrainerConfig, fit_samples, harmonize_sample


def _auto_decay(epochs: int) -> tuple:
    """Late two-stage decay in the same proportions as the full schedule."""
    d1 = min(epochs - 1, max(1, round(epochs * 0.958)))
    d0 = min(d1 - 1, max(0, round(epochs * 0.875)))
    return (d0, d1)


def _split_inputs(X, y=None):
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 4 or X.shape[1] != 4:
        raise DimensionError(f"X must be [n,4,H,W] (RGB + mask), got {X.shape}")
    if y is not None:
        y = np.asarray(y, dtype=np.float64)
        if y.shape != (X.shape[0], 3) + X.shape[2:]:
            raise DimensionError(
                f"y must be [n,3,H,W] matching X, got {y.shape} for X {X.shape}")
    return X, y


class HDNetHarmonizer(BaseEstimator):
    """Image harmonization model with a fit/predict interface."""

    def __init__(self, variant="full", base_channels=8, k_neighbors=1,
                 epochs=10, learning_rate=1e-3, batch_size=4, seed=0,
                 a_min=100.0):
        self.variant = variant
        self.base_channels = base_channels
        self.k_neighbors = k_neighbors
        self.epochs = epochs
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.seed = seed
        self.a_min = a_min

    def _config(self) -> TrainerConfig:
        return TrainerConfig(learning_rate=self.learning_rate,
                             epochs=self.epochs,
                             decay_epochs=_auto_decay(self.epochs),
                             batch_size=self.batch_size,
                             seed=self.seed,
                             variant=self.variant,
                             base_channels=self.base_channels,
                             k_neighbors=self.k_neighbors,
                             a_min=self.a_min)

    def fit(self, X, y):
        X, y = _split_inputs(X, y)
        samples = [CompositeSample(ground_truth=y[i:i + 1],
                                   composite=X[i:i + 1, :3],
                                   mask=Mask(X[i:i + 1, 3:4]),
                                   seed=i)
                   for i in range(X.shape[0])]
        params, state, history = fit_samples(samples, self._config())
        self.params_ = params
        self.state_ = state
        self.history_ = history
        return self

    def _check_fitted(self):
        if not hasattr(self, "params_"):
            raise NotFittedError(
                "this HDNetHarmonizer instance is not fitted yet; call fit first")

    def predict(self, X):
        self._check_fitted()
        X, _ = _split_inputs(X)
        outputs = []
        for i in range(X.shape[0]):
            sample = CompositeSample(ground_truth=X[i:i + 1, :3],
                                     composite=X[i:i + 1, :3],
                                     mask=Mask(X[i:i + 1, 3:4]),
                                     seed=i)
            outputs.append(harmonize_sample(self.params_, sample).data)
        return np.concatenate(outputs, axis=0)

    def score(self, X, y):
        """Mean PSNR of predictions against y (higher is better)."""
        self._check_fitted()
        X, y = _split_inputs(X, y)
        preds = self.predict(X)
        return float(np.mean([psnr(preds[i:i + 1], y[i:i + 1])
                              for i in range(X.shape[0])]))
