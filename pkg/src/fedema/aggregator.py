"""Server-side aggregation: weighted model averaging and the EMA fusion step."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ConfigError, DimensionError, InvalidWeightsError

WEIGHT_SUM_TOL = 1e-9


def data_weights(sizes: Sequence[int]) -> np.ndarray:
    """p_c = |D_c| / |D|."""
    sizes = np.asarray(sizes, dtype=np.float64)
    if sizes.size == 0 or np.any(sizes < 0) or sizes.sum() <= 0:
        raise InvalidWeightsError(f"invalid shard sizes {sizes.tolist()}")
    return sizes / sizes.sum()


def aggregate(models: Sequence[np.ndarray], weights: Sequence[float]) -> np.ndarray:
    """Weighted average sum_c p_c * w_c."""
    if len(models) != len(weights) or not models:
        raise InvalidWeightsError(
            f"got {len(models)} models and {len(weights)} weights"
        )
    w = np.asarray(weights, dtype=np.float64)
    if np.any(w < 0) or abs(w.sum() - 1.0) > WEIGHT_SUM_TOL:
        raise InvalidWeightsError(f"weights must be nonnegative and sum to 1, got {w.sum()!r}")
    if not _same_len(models):
        raise DimensionError("all models must be 1-D vectors of equal length")
    stack = np.asarray(models, dtype=np.float64)
    if stack.ndim != 2:
        raise DimensionError("models must be 1-D vectors")
    if len(models) == 1:
        return stack[0].copy()
    # fixed summation order keeps results independent of BLAS threading
    out = w[0] * stack[0]
    for c in range(1, len(models)):
        out = out + w[c] * stack[c]
    return out


def _same_len(models) -> bool:
    n = np.shape(models[0])
    return all(np.shape(m) == n for m in models)


def beta_from_window(window: int) -> float:
    """EMA decay from the window size: beta = 2 / (N + 1)."""
    if int(window) != window or window < 2:
        raise ConfigError(f"window size must be an integer >= 2, got {window!r}")
    return 2.0 / (int(window) + 1)


def validate_beta(beta: float) -> float:
    beta = float(beta)
    if not 0.0 <= beta < 1.0:
        raise ConfigError(f"EMA decay must lie in [0, 1), got {beta}")
    return beta


def ema_update(prev: np.ndarray, aggregated: np.ndarray, beta: float) -> np.ndarray:
    """beta * prev + (1 - beta) * aggregated."""
    prev = np.asarray(prev, dtype=np.float64)
    aggregated = np.asarray(aggregated, dtype=np.float64)
    if prev.shape != aggregated.shape:
        raise DimensionError(f"EMA operands differ: {prev.shape} vs {aggregated.shape}")
    beta = validate_beta(beta)
    if beta == 0.0:
        return aggregated.copy()
    return beta * prev + (1.0 - beta) * aggregated


def momentum_residual(prev: np.ndarray, aggregated: np.ndarray, beta: float) -> np.ndarray:
    """Step taken by the EMA model this round, ema_update(prev, agg) - prev.

    Algebraically (1 - beta) * (aggregated - prev).
    """
    return ema_update(prev, aggregated, beta) - np.asarray(prev, dtype=np.float64)


def unrolled_ema(initial: np.ndarray, aggregates: Sequence[np.ndarray], beta: float) -> np.ndarray:
    """Closed form beta^r w0 + (1-beta) sum_i beta^(r-i) w_i, evaluated directly."""
    r = len(aggregates)
    out = beta**r * np.asarray(initial, dtype=np.float64)
    for i, agg in enumerate(aggregates, start=1):
        out = out + (1.0 - beta) * beta ** (r - i) * np.asarray(agg, dtype=np.float64)
    return out


@dataclass
class ServerState:
    round_index: int
    ema: np.ndarray
    beta: float
    weights: np.ndarray = field(default_factory=lambda: np.ones(1))
    last_aggregate: np.ndarray | None = None

    def __post_init__(self):
        self.beta = validate_beta(self.beta)

    def step(self, client_models: Sequence[np.ndarray], weights: Sequence[float]) -> np.ndarray:
        """Aggregate client models, fuse into the EMA, advance the round counter."""
        agg = aggregate(client_models, weights)
        self.weights = np.asarray(weights, dtype=np.float64)
        self.last_aggregate = agg
        self.ema = ema_update(self.ema, agg, self.beta)
        self.round_index += 1
        return agg
