"""Experiment configuration and its JSON file form."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .aggregator import beta_from_window, validate_beta
from .errors import ConfigError
from .scenegen import SceneConfig
from .segnet import ModelConfig
from .vehicle import AdamConfig, LocalObjective

SCHEMA_VERSION = 1
ALGORITHMS = ("fedema", "fedavg", "fedprox")


@dataclass(frozen=True)
class ModelShape:
    hidden_dim: int = 64


@dataclass(frozen=True)
class ExperimentConfig:
    algorithm: str = "fedema"
    clients: int = 4
    rounds: int = 60
    tau: int = 5
    lam: float = 0.002
    sign: int = 1
    window: int | None = 5
    beta: float | None = None
    mu: float = 0.0
    optimizer: AdamConfig = field(default_factory=AdamConfig)
    model: ModelShape = field(default_factory=ModelShape)
    scene: SceneConfig = field(default_factory=SceneConfig)
    phases: int = 3
    phase_starts: tuple[int, ...] | None = None
    images_per_client: int = 40
    batch_images: int = 8
    partition_alpha: float = 1.0
    eval_images: int = 24
    eval_every: int = 1
    objective_threshold: float = 0.9
    workers: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise ConfigError(f"algorithm must be one of {ALGORITHMS}, got {self.algorithm!r}")
        for name in ("clients", "rounds", "tau", "images_per_client", "batch_images",
                     "eval_every", "workers", "phases"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.eval_images < self.clients:
            raise ConfigError("eval_images must be at least the client count")
        if self.partition_alpha <= 0:
            raise ConfigError("partition_alpha must be positive")
        if self.lam < 0 or self.mu < 0:
            raise ConfigError("lam and mu must be nonnegative")
        if self.sign not in (1, -1):
            raise ConfigError("sign must be +1 or -1")
        if self.algorithm != "fedema" and self.lam != 0:
            raise ConfigError(f"lam applies only to fedema (got lam={self.lam} for {self.algorithm})")
        if self.algorithm != "fedprox" and self.mu != 0:
            raise ConfigError(f"mu applies only to fedprox (got mu={self.mu} for {self.algorithm})")
        if self.beta is not None:
            validate_beta(self.beta)
        elif self.window is not None:
            beta_from_window(self.window)
        elif self.algorithm == "fedema":
            raise ConfigError("fedema needs either window or beta")
        if self.phase_starts is not None:
            object.__setattr__(self, "phase_starts", tuple(int(s) for s in self.phase_starts))
        if not math.isfinite(self.objective_threshold):
            raise ConfigError("objective_threshold must be finite")
        if self.scene.class_count < 2:
            raise ConfigError("class_count must be >= 2")

    @property
    def effective_beta(self) -> float:
        """EMA decay actually applied; baselines always run with 0."""
        if self.algorithm != "fedema":
            return 0.0
        if self.beta is not None:
            return validate_beta(self.beta)
        return beta_from_window(self.window)

    @property
    def window_label(self) -> int:
        """Window size for reporting; 0 when beta is set directly or unused."""
        if self.algorithm != "fedema" or self.beta is not None or self.window is None:
            return 0
        return int(self.window)

    @property
    def local_objective(self) -> LocalObjective:
        if self.algorithm == "fedprox":
            return LocalObjective("prox", mu=self.mu)
        lam = self.lam if self.algorithm == "fedema" else 0.0
        return LocalObjective("entropy", lam=lam, sign=self.sign)

    @property
    def model_config(self) -> ModelConfig:
        return ModelConfig(self.scene.feature_dim, self.model.hidden_dim, self.scene.class_count, self.seed)

    def with_overrides(self, **kw) -> "ExperimentConfig":
        return replace(self, **kw)

    def to_dict(self) -> dict:
        d = {"schema_version": SCHEMA_VERSION}
        for f in fields(self):
            value = getattr(self, f.name)
            if f.name in _NESTED:
                value = asdict(value)
            elif isinstance(value, tuple):
                value = list(value)
            d[f.name] = value
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        if not isinstance(data, dict):
            raise ConfigError("config must be a JSON object")
        data = dict(data)
        version = data.pop("schema_version", None)
        if version != SCHEMA_VERSION:
            raise ConfigError(f"schema_version must be {SCHEMA_VERSION}, got {version!r}")
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        kwargs = {}
        for key, value in data.items():
            if key in _NESTED:
                kwargs[key] = _build_nested(key, _NESTED[key], value)
            elif key == "phase_starts" and value is not None:
                kwargs[key] = tuple(value)
            else:
                kwargs[key] = value
        try:
            return cls(**kwargs)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    def canonical_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()


_NESTED = {"optimizer": AdamConfig, "model": ModelShape, "scene": SceneConfig}


def _build_nested(key: str, cls, value):
    if not isinstance(value, dict):
        raise ConfigError(f"{key} must be an object")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(value) - known)
    if unknown:
        raise ConfigError(f"unknown keys in {key}: {', '.join(unknown)}")
    try:
        return cls(**value)
    except TypeError as exc:
        raise ConfigError(f"{key}: {exc}") from exc


def load_config(path) -> ExperimentConfig:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return ExperimentConfig.from_dict(data)


def save_config(cfg: ExperimentConfig, path) -> None:
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
