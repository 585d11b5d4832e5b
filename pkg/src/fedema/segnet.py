"""Two-layer per-pixel classifier (F -> tanh(Hd) -> K) with exact gradients.

Parameter layout in the flat vector: W1 (F x Hd, row-major), b1 (Hd),
W2 (Hd x K, row-major), b2 (K).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ConfigError, DimensionError, InvalidInputError, InvalidLabelError
from .numerics import safe_log, softmax


@dataclass(frozen=True)
class ModelConfig:
    feature_dim: int = 3
    hidden_dim: int = 64
    class_count: int = 6
    seed: int = 0

    def __post_init__(self):
        if self.feature_dim < 1 or self.hidden_dim < 1:
            raise ConfigError("feature_dim and hidden_dim must be >= 1")
        if self.class_count < 2:
            raise ConfigError("class_count must be >= 2")

    @property
    def param_count(self) -> int:
        f, h, k = self.feature_dim, self.hidden_dim, self.class_count
        return f * h + h + h * k + k


@dataclass(frozen=True)
class Batch:
    """Pixels pooled from one or more images: features (P, F), labels (P,)."""

    features: np.ndarray
    labels: np.ndarray
    image_ids: tuple = field(default=())

    def __post_init__(self):
        feats = np.asarray(self.features, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64)
        if feats.ndim != 2 or labels.ndim != 1 or feats.shape[0] != labels.shape[0]:
            raise DimensionError(
                f"batch shapes disagree: features {feats.shape}, labels {labels.shape}"
            )
        if labels.size == 0:
            raise InvalidInputError("batch must contain at least one pixel")
        if labels.min() < 0:
            raise InvalidLabelError("negative label in batch")
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "labels", labels)

    def __len__(self) -> int:
        return int(self.labels.size)

    @classmethod
    def from_scenes(cls, scenes: Sequence) -> "Batch":
        feats = np.concatenate([s.features.reshape(-1, s.features.shape[-1]) for s in scenes])
        labels = np.concatenate([s.labels.reshape(-1) for s in scenes])
        return cls(feats, labels, tuple(s.image_id for s in scenes))


def unpack(params: np.ndarray, cfg: ModelConfig):
    params = np.asarray(params, dtype=np.float64)
    if params.shape != (cfg.param_count,):
        raise DimensionError(
            f"expected {cfg.param_count} parameters, got shape {params.shape}"
        )
    f, h, k = cfg.feature_dim, cfg.hidden_dim, cfg.class_count
    i = 0
    w1 = params[i : i + f * h].reshape(f, h)
    i += f * h
    b1 = params[i : i + h]
    i += h
    w2 = params[i : i + h * k].reshape(h, k)
    i += h * k
    b2 = params[i : i + k]
    return w1, b1, w2, b2


def init_params(cfg: ModelConfig, seed: int | None = None) -> np.ndarray:
    """Glorot-uniform weights, zero biases."""
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    f, h, k = cfg.feature_dim, cfg.hidden_dim, cfg.class_count
    lim1 = np.sqrt(6.0 / (f + h))
    lim2 = np.sqrt(6.0 / (h + k))
    w1 = rng.uniform(-lim1, lim1, size=f * h)
    w2 = rng.uniform(-lim2, lim2, size=h * k)
    return np.concatenate([w1, np.zeros(h), w2, np.zeros(k)])


def _check_labels(batch: Batch, cfg: ModelConfig) -> None:
    if batch.features.shape[1] != cfg.feature_dim:
        raise DimensionError(
            f"batch has {batch.features.shape[1]} features, model expects {cfg.feature_dim}"
        )
    if batch.labels.max() >= cfg.class_count:
        raise InvalidLabelError(f"label >= class_count ({cfg.class_count})")


def _forward_cache(params, batch: Batch, cfg: ModelConfig):
    _check_labels(batch, cfg)
    w1, b1, w2, b2 = unpack(params, cfg)
    hidden = np.tanh(batch.features @ w1 + b1)
    probs = softmax(hidden @ w2 + b2)
    return hidden, probs


def forward(params, batch: Batch, cfg: ModelConfig) -> np.ndarray:
    """Per-pixel class probabilities, shape (pixels, K)."""
    return _forward_cache(params, batch, cfg)[1]


def predict(params, features: np.ndarray, cfg: ModelConfig) -> np.ndarray:
    """Argmax labels for a raw (pixels, F) feature array."""
    w1, b1, w2, b2 = unpack(params, cfg)
    logits = np.tanh(features @ w1 + b1) @ w2 + b2
    return np.argmax(logits, axis=-1)


def cross_entropy(probs, labels) -> float:
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if probs.shape[0] != labels.shape[0]:
        raise DimensionError("probs and labels differ in length")
    picked = probs[np.arange(labels.size), labels]
    return float(-np.mean(safe_log(picked)))


def negative_entropy(probs) -> float:
    """Mean over pixels of sum_k p_k log p_k (always in [-ln K, 0])."""
    probs = np.asarray(probs, dtype=np.float64)
    if probs.size == 0:
        raise InvalidInputError("negative_entropy of an empty batch")
    return float(np.mean(np.sum(probs * safe_log(probs), axis=-1)))


def _check_reg(lam: float, sign: int) -> None:
    if lam < 0:
        raise ConfigError(f"regularization coefficient must be >= 0, got {lam}")
    if sign not in (1, -1):
        raise ConfigError(f"regularizer sign must be +1 or -1, got {sign}")


def objective(params, batch: Batch, cfg: ModelConfig, lam: float = 0.0, sign: int = 1) -> float:
    """Cross-entropy plus sign * lam * negative entropy."""
    _check_reg(lam, sign)
    probs = forward(params, batch, cfg)
    ce = cross_entropy(probs, batch.labels)
    if lam == 0.0:
        return ce
    return ce + sign * lam * negative_entropy(probs)


def objective_and_grad(params, batch: Batch, cfg: ModelConfig, lam: float = 0.0, sign: int = 1):
    _check_reg(lam, sign)
    hidden, probs = _forward_cache(params, batch, cfg)
    w1, b1, w2, b2 = unpack(params, cfg)
    n = len(batch)
    rows = np.arange(n)

    value = cross_entropy(probs, batch.labels)
    dlogits = probs.copy()
    dlogits[rows, batch.labels] -= 1.0
    if lam != 0.0:
        logp = safe_log(probs)
        plogp = np.sum(probs * logp, axis=-1, keepdims=True)
        value += sign * lam * float(np.mean(plogp))
        # d/dz_k of sum_j p_j log p_j = p_k (log p_k - sum_j p_j log p_j)
        dlogits += sign * lam * probs * (logp - plogp)
    dlogits /= n

    gw2 = hidden.T @ dlogits
    gb2 = dlogits.sum(axis=0)
    dpre = (dlogits @ w2.T) * (1.0 - hidden * hidden)
    gw1 = batch.features.T @ dpre
    gb1 = dpre.sum(axis=0)
    grad = np.concatenate([gw1.ravel(), gb1, gw2.ravel(), gb2])
    return value, grad


def backward(params, batch: Batch, cfg: ModelConfig, lam: float = 0.0, sign: int = 1) -> np.ndarray:
    """Exact gradient of ``objective`` with respect to the flat parameters."""
    return objective_and_grad(params, batch, cfg, lam, sign)[1]
