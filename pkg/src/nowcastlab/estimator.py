"""scikit-learn compatible wrappers.

Array layout for ``X`` is ``(n, 24, H, W)``: four rain frames followed by
the 20 auxiliary frames (five variables, four time steps each, variable
major). ``y`` is ``(n, 4, H, W)`` of future rain. Values are in physical
units; normalization happens inside.
"""
from __future__ import annotations

import numpy as np
import torch
from sklearn.base import BaseEstimator, RegressorMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .datamodel import (
    AUX_VARIABLES,
    N_AUX_CHANNELS,
    N_INPUT_FRAMES,
    N_TARGET_FRAMES,
    Sample,
    Variable,
    VariableStats,
    denormalize_array,
    normalize_array,
)
from .exceptions import InvalidInputError, ShapeError
from .models import ModelConfig, ModelVariant, build_model
from .pipeline import compute_stats
from .training import TrainConfig, fit

N_FEATURE_CHANNELS = N_INPUT_FRAMES + N_AUX_CHANNELS


def check_frames(X, channels: int | None = None, name: str = "X") -> np.ndarray:
    """Validate a ``(n, C, H, W)`` finite float array and return it as float32."""
    try:
        arr = np.asarray(X, dtype=np.float32)
    except (TypeError, ValueError) as exc:
        raise InvalidInputError(f"{name} is not numeric: {exc}") from exc
    if arr.ndim != 4:
        raise ShapeError(f"{name} must be 4-D (n, C, H, W), got shape {arr.shape}")
    if arr.shape[0] == 0:
        raise InvalidInputError(f"{name} holds zero samples")
    if channels is not None and arr.shape[1] != channels:
        raise ShapeError(f"{name} must have {channels} channels, got {arr.shape[1]}")
    if not np.isfinite(arr).all():
        raise InvalidInputError(f"{name} contains NaN or infinite values")
    return arr


def check_X_y(X, y):
    X = check_frames(X, N_FEATURE_CHANNELS, "X")
    y = check_frames(y, N_TARGET_FRAMES, "y")
    if y.shape[0] != X.shape[0] or y.shape[2:] != X.shape[2:]:
        raise ShapeError(f"y {y.shape} does not match X {X.shape}")
    return X, y


def channel_variables() -> list[Variable]:
    """Variable carried by each of the 24 input channels."""
    out = [Variable.RAIN] * N_INPUT_FRAMES
    for var in AUX_VARIABLES:
        out += [var] * N_INPUT_FRAMES
    return out


def arrays_to_samples(X, y=None) -> list[Sample]:
    n, _, h, w = X.shape
    if y is None:
        y = np.zeros((n, N_TARGET_FRAMES, h, w), dtype=np.float32)
    return [
        Sample(X[i, :N_INPUT_FRAMES], y[i], X[i, N_INPUT_FRAMES:].reshape(len(AUX_VARIABLES), N_INPUT_FRAMES, h, w),
               sequence_id=i)
        for i in range(n)
    ]


class VariableNormalizer(TransformerMixin, BaseEstimator):
    """Per-variable min-max scaling of ``(n, 24, H, W)`` input stacks.

    Relative humidity is already a fraction and passes through.
    """

    def fit(self, X, y=None):
        X = check_frames(X, N_FEATURE_CHANNELS)
        samples = arrays_to_samples(X, None if y is None else check_frames(y, N_TARGET_FRAMES, "y"))
        stats = compute_stats(samples)
        if y is None:
            rain = X[:, :N_INPUT_FRAMES]
            stats[Variable.RAIN] = VariableStats(Variable.RAIN, float(rain.min()), float(rain.max()))
        self.stats_ = stats
        self.n_features_in_ = N_FEATURE_CHANNELS
        return self

    def _apply(self, X, fn):
        check_is_fitted(self, "stats_")
        X = check_frames(X, N_FEATURE_CHANNELS)
        out = np.empty_like(X)
        for c, var in enumerate(channel_variables()):
            out[:, c] = fn(X[:, c], self.stats_[var])
        return out

    def transform(self, X):
        return self._apply(X, normalize_array)

    def inverse_transform(self, X):
        return self._apply(X, denormalize_array)

    def transform_rain(self, y):
        check_is_fitted(self, "stats_")
        return normalize_array(check_frames(y, None, "y"), self.stats_[Variable.RAIN])

    def inverse_transform_rain(self, y):
        check_is_fitted(self, "stats_")
        return denormalize_array(np.asarray(y, dtype=np.float32), self.stats_[Variable.RAIN])


class NowcastForecaster(RegressorMixin, BaseEstimator):
    """Train one of the model variants on in-memory arrays.

    ``score`` returns the negative mean squared error in physical units, so
    larger is better as scikit-learn model selection expects.
    """

    def __init__(self, variant="mad_smaat_gnet", max_epochs=10, batch_size=16, lr_init=1e-3,
                 validation_fraction=0.1, seed=0, pretrained_evo=None, freeze_evo=False):
        self.variant = variant
        self.max_epochs = max_epochs
        self.batch_size = batch_size
        self.lr_init = lr_init
        self.validation_fraction = validation_fraction
        self.seed = seed
        self.pretrained_evo = pretrained_evo
        self.freeze_evo = freeze_evo

    def fit(self, X, y):
        X, y = check_X_y(X, y)
        if not 0 < self.validation_fraction < 1:
            raise InvalidInputError("validation_fraction must be in (0, 1)")
        variant = ModelVariant(self.variant)
        self.normalizer_ = VariableNormalizer().fit(X, y)
        Xn = self.normalizer_.transform(X)
        yn = self.normalizer_.transform_rain(y)
        self.model_ = build_model(ModelConfig(variant, input_size=X.shape[2:]), seed=self.seed)
        self.history_ = None
        if variant.trainable:
            samples = arrays_to_samples(Xn, yn)
            n_val = max(1, int(round(len(samples) * self.validation_fraction)))
            if n_val >= len(samples):
                raise InvalidInputError("need at least two samples to hold out a validation set")
            cfg = TrainConfig(lr_init=self.lr_init, batch_size=self.batch_size, max_epochs=self.max_epochs,
                              seed=self.seed, pretrained_evo=self.pretrained_evo, freeze_evo=self.freeze_evo)
            self.model_, self.history_ = fit(self.model_, samples[:-n_val], samples[-n_val:], cfg)
        self.n_features_in_ = N_FEATURE_CHANNELS
        return self

    @torch.no_grad()
    def predict(self, X):
        check_is_fitted(self, "model_")
        X = check_frames(X, N_FEATURE_CHANNELS)
        Xn = torch.from_numpy(self.normalizer_.transform(X))
        self.model_.eval()
        out = []
        for start in range(0, len(Xn), self.batch_size):
            chunk = Xn[start:start + self.batch_size]
            out.append(self.model_(chunk[:, :N_INPUT_FRAMES], chunk[:, N_INPUT_FRAMES:]).numpy())
        return self.normalizer_.inverse_transform_rain(np.concatenate(out))

    def score(self, X, y, sample_weight=None):
        y = check_frames(y, N_TARGET_FRAMES, "y")
        err = (self.predict(X).astype(np.float64) - y) ** 2
        per_sample = err.reshape(len(err), -1).mean(axis=1)
        return -float(np.average(per_sample, weights=sample_weight))
