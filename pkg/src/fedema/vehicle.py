"""Client-side local training: Adam with decoupled weight decay, FedEMA and FedProx objectives."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ConfigError, DimensionError, OptimizerError
from .segnet import Batch, ModelConfig, cross_entropy, forward, objective_and_grad


@dataclass(frozen=True)
class AdamConfig:
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-4

    def __post_init__(self):
        if self.lr <= 0:
            raise ConfigError("learning rate must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("Adam betas must lie in [0, 1)")
        if self.eps <= 0 or self.weight_decay < 0:
            raise ConfigError("eps must be positive and weight decay nonnegative")


@dataclass(frozen=True)
class OptimizerState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    config: AdamConfig = field(default_factory=AdamConfig)

    @classmethod
    def fresh(cls, dim: int, config: AdamConfig | None = None) -> "OptimizerState":
        return cls(np.zeros(dim), np.zeros(dim), 0, config or AdamConfig())


def adam_step(state: OptimizerState, params: np.ndarray, grad: np.ndarray):
    """One bias-corrected Adam step followed by decoupled weight decay.

    Returns ``(new_state, new_params)``; inputs are not modified.
    """
    params = np.asarray(params, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    if not (params.shape == grad.shape == state.m.shape):
        raise DimensionError(
            f"adam_step shapes disagree: params {params.shape}, grad {grad.shape}, state {state.m.shape}"
        )
    if not np.all(np.isfinite(grad)):
        raise OptimizerError(f"non-finite gradient at step {state.t + 1}")
    cfg = state.config
    t = state.t + 1
    m = cfg.beta1 * state.m + (1.0 - cfg.beta1) * grad
    v = cfg.beta2 * state.v + (1.0 - cfg.beta2) * grad * grad
    m_hat = m / (1.0 - cfg.beta1**t)
    v_hat = v / (1.0 - cfg.beta2**t)
    new_params = params - cfg.lr * m_hat / (np.sqrt(v_hat) + cfg.eps)
    if cfg.weight_decay:
        new_params = new_params - cfg.lr * cfg.weight_decay * params
    return OptimizerState(m, v, t, cfg), new_params


def fedprox_objective(params, batch: Batch, cfg: ModelConfig, anchor, mu: float) -> float:
    """Cross-entropy plus (mu / 2) * ||params - anchor||^2."""
    if mu < 0:
        raise ConfigError(f"proximal coefficient must be >= 0, got {mu}")
    params = np.asarray(params, dtype=np.float64)
    anchor = np.asarray(anchor, dtype=np.float64)
    if params.shape != anchor.shape:
        raise DimensionError(f"anchor shape {anchor.shape} != params shape {params.shape}")
    ce = cross_entropy(forward(params, batch, cfg), batch.labels)
    diff = params - anchor
    return ce + 0.5 * mu * float(diff @ diff)


def fedprox_objective_and_grad(params, batch: Batch, cfg: ModelConfig, anchor, mu: float):
    value, grad = objective_and_grad(params, batch, cfg, 0.0, 1)
    if mu:
        diff = np.asarray(params, dtype=np.float64) - anchor
        value += 0.5 * mu * float(diff @ diff)
        grad = grad + mu * diff
    return value, grad


@dataclass(frozen=True)
class LocalObjective:
    """Which local loss a vehicle minimises.

    ``kind`` is ``"entropy"`` (CE + sign * lam * negative entropy) or
    ``"prox"`` (CE + mu/2 ||w - anchor||^2 with the round's start model as anchor).
    """

    kind: str = "entropy"
    lam: float = 0.0
    sign: int = 1
    mu: float = 0.0

    def __post_init__(self):
        if self.kind not in ("entropy", "prox"):
            raise ConfigError(f"unknown local objective {self.kind!r}")
        if self.lam < 0 or self.mu < 0:
            raise ConfigError("lam and mu must be nonnegative")
        if self.sign not in (1, -1):
            raise ConfigError("sign must be +1 or -1")


@dataclass
class LocalTrainReport:
    params: np.ndarray
    objectives: list[float]
    grad_norms_sq: list[float]
    steps: int

    @property
    def mean_objective(self) -> float:
        return float(np.mean(self.objectives)) if self.objectives else float("nan")


def batch_schedule(n_images: int, tau: int, batch_images: int, rng: np.random.Generator):
    """Image indices for each of tau steps: one shuffle, consumed cyclically."""
    order = rng.permutation(n_images)
    per = min(batch_images, n_images)
    return [order[(np.arange(per) + t * per) % n_images] for t in range(tau)]


def local_train(
    start: np.ndarray,
    scenes: Sequence,
    cfg: ModelConfig,
    tau: int,
    local_objective: LocalObjective,
    optimizer: AdamConfig,
    seed,
    batch_images: int = 8,
) -> LocalTrainReport:
    """Run exactly tau Adam steps from ``start`` on a round's shard.

    Optimizer moments start from zero every call; only parameters are
    carried between rounds.
    """
    if tau < 0:
        raise ConfigError(f"tau must be >= 0, got {tau}")
    if len(scenes) == 0:
        raise ConfigError("local shard is empty")
    if batch_images < 1:
        raise ConfigError("batch_images must be >= 1")
    start = np.asarray(start, dtype=np.float64)
    params = start.copy()
    if tau == 0:
        return LocalTrainReport(params, [], [], 0)

    rng = np.random.default_rng(seed)
    schedule = batch_schedule(len(scenes), tau, batch_images, rng)
    state = OptimizerState.fresh(params.size, optimizer)
    objectives, norms = [], []
    for idx in schedule:
        batch = Batch.from_scenes([scenes[i] for i in idx])
        if local_objective.kind == "prox":
            value, grad = fedprox_objective_and_grad(params, batch, cfg, start, local_objective.mu)
        else:
            value, grad = objective_and_grad(
                params, batch, cfg, local_objective.lam, local_objective.sign
            )
        objectives.append(float(value))
        norms.append(float(grad @ grad))
        state, params = adam_step(state, params, grad)
    return LocalTrainReport(params, objectives, norms, len(schedule))
