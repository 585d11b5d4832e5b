"""Flat-vector numerics: softmax, clamped logs, axpy and a finite-difference oracle.

Parameter vectors are plain 1-D float64 numpy arrays throughout the package.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from .errors import DimensionError, InvalidInputError, OracleError

EPS_CLAMP = 1e-12


def as_params(values, *, name: str = "params") -> np.ndarray:
    """Coerce to a finite 1-D float64 array (copying only when needed)."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 1:
        raise DimensionError(f"{name} must be 1-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise InvalidInputError(f"{name} contains non-finite entries")
    return arr


def softmax(logits) -> np.ndarray:
    """Softmax along the last axis with max-subtraction.

    Accepts a single logit vector or a (pixels, K) matrix.
    """
    z = np.asarray(logits, dtype=np.float64)
    if z.ndim == 0 or z.shape[-1] < 2:
        raise InvalidInputError("softmax needs at least two classes")
    if not np.all(np.isfinite(z)):
        raise InvalidInputError("softmax input contains non-finite logits")
    shifted = z - z.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def clamp_probs(probs) -> np.ndarray:
    return np.maximum(np.asarray(probs, dtype=np.float64), EPS_CLAMP)


def safe_log(probs) -> np.ndarray:
    """log of probabilities clamped at EPS_CLAMP, never -inf."""
    return np.log(clamp_probs(probs))


def axpy_combine(a: float, x, b: float, y) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise DimensionError(f"length mismatch: {x.shape} vs {y.shape}")
    if b == 0.0 and a == 1.0:
        return x.copy()
    return a * x + b * y


def finite_diff_gradient(
    f: Callable[[np.ndarray], float], at, h: float = 1e-5
) -> np.ndarray:
    """Central-difference gradient of a scalar function, one coordinate at a time."""
    if not h > 0:
        raise InvalidInputError(f"step size must be positive, got {h}")
    x = np.array(at, dtype=np.float64)
    grad = np.empty_like(x)
    for i in range(x.size):
        orig = x[i]
        x[i] = orig + h
        f_plus = float(f(x.copy()))
        x[i] = orig - h
        f_minus = float(f(x.copy()))
        x[i] = orig
        if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
            raise OracleError(f"non-finite function value when perturbing coordinate {i}")
        grad[i] = (f_plus - f_minus) / (2.0 * h)
    return grad


def max_relative_error(analytic, numeric, floor: float = 1e-6) -> float:
    """Largest per-coordinate |a - n| / max(|a|, |n|, floor).

    The floor keeps near-zero coordinates from turning finite-difference
    round-off (~1e-11) into a spurious large ratio.
    """
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    if a.shape != n.shape:
        raise DimensionError(f"shape mismatch: {a.shape} vs {n.shape}")
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0
