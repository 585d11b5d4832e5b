"""Synthetic street scenes with a phased drift schedule, plus non-IID partitioning.

Scenes are small label maps built from horizontal bands (sky, building,
sidewalk, road) with vegetation patches and vehicle blobs.  Each pixel's
feature vector is its class mean for the active phase plus Gaussian noise.
Between phases the class means rotate in the first two feature axes and
the class priors re-mix, which is what drives forgetting.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigError, RoundRangeError

SKY, BUILDING, VEGETATION, SIDEWALK, ROAD, VEHICLE = range(6)
CLASS_NAMES = ("sky", "building", "vegetation", "sidewalk", "road", "vehicle")
BAND_CLASSES = (SKY, BUILDING, SIDEWALK, ROAD)
BASE_PRIORS = np.array([0.20, 0.25, 0.08, 0.12, 0.27, 0.08])


@dataclass(frozen=True)
class SceneConfig:
    width: int = 16
    height: int = 16
    feature_dim: int = 3
    class_count: int = 6
    noise_sigma: float = 0.5
    mean_radius: float = 3.0
    min_separation: float = 1.0
    drift_angle_deg: float = 40.0
    drift_offset: float = 0.0
    prior_mix: float = 0.5

    def __post_init__(self):
        if self.class_count != len(CLASS_NAMES):
            raise ConfigError(f"scene generator draws exactly {len(CLASS_NAMES)} classes")
        if self.feature_dim < 2:
            raise ConfigError("scene generator needs feature_dim >= 2")
        if self.width < 4 or self.height < 4:
            raise ConfigError("scenes must be at least 4x4")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be >= 0")
        if not 0.0 <= self.prior_mix <= 1.0:
            raise ConfigError("prior_mix must lie in [0, 1]")


@dataclass(frozen=True)
class PhaseParams:
    phase_id: int
    means: np.ndarray  # (K, F)
    priors: np.ndarray  # (K,)
    geometry_offset: int = 0

    def validate(self, min_separation: float = 0.0) -> None:
        if abs(self.priors.sum() - 1.0) > 1e-9 or np.any(self.priors < 0):
            raise ConfigError(f"phase {self.phase_id}: priors must be a distribution")
        diff = self.means[:, None, :] - self.means[None, :, :]
        dist = np.sqrt((diff**2).sum(-1))
        np.fill_diagonal(dist, np.inf)
        if dist.min() < min_separation:
            raise ConfigError(
                f"phase {self.phase_id}: class means closer than {min_separation}"
            )


@dataclass(frozen=True)
class DriftSchedule:
    starts: tuple[int, ...]
    phases: tuple[PhaseParams, ...]
    total_rounds: int

    def __post_init__(self):
        if len(self.starts) != len(self.phases) or not self.starts:
            raise ConfigError("schedule needs one start round per phase")
        if self.starts[0] != 1:
            raise ConfigError("first phase must start at round 1")
        if any(b <= a for a, b in zip(self.starts, self.starts[1:])):
            raise ConfigError("phase start rounds must be strictly increasing")
        if self.starts[-1] > self.total_rounds:
            raise ConfigError("every phase must start within the total rounds")

    def phase_index(self, r: int) -> int:
        if not 1 <= r <= self.total_rounds:
            raise RoundRangeError(f"round {r} outside 1..{self.total_rounds}")
        idx = 0
        for i, s in enumerate(self.starts):
            if s <= r:
                idx = i
        return idx


def phase_at(schedule: DriftSchedule, r: int) -> PhaseParams:
    return schedule.phases[schedule.phase_index(r)]


def equal_phase_starts(total_rounds: int, phase_count: int) -> tuple[int, ...]:
    if phase_count < 1 or phase_count > total_rounds:
        raise ConfigError(f"cannot split {total_rounds} rounds into {phase_count} phases")
    return tuple(1 + (i * total_rounds) // phase_count for i in range(phase_count))


def base_means(cfg: SceneConfig, seed: int) -> np.ndarray:
    """Class means on a circle in the first two feature axes.

    Remaining axes carry small, phase-invariant class offsets.
    """
    k, f = cfg.class_count, cfg.feature_dim
    angles = 2.0 * np.pi * np.arange(k) / k
    means = np.zeros((k, f))
    means[:, 0] = cfg.mean_radius * np.cos(angles)
    means[:, 1] = cfg.mean_radius * np.sin(angles)
    if f > 2:
        rng = np.random.default_rng([seed, 0x5EED])
        means[:, 2:] = rng.normal(0.0, 0.25, size=(k, f - 2))
    return means


def make_phase(cfg: SceneConfig, phase_id: int, seed: int) -> PhaseParams:
    means = base_means(cfg, seed).copy()
    theta = np.deg2rad(cfg.drift_angle_deg) * phase_id
    rot = np.array([[np.cos(theta), -np.sin(theta)], [np.sin(theta), np.cos(theta)]])
    means[:, :2] = means[:, :2] @ rot.T
    means[:, :2] += cfg.drift_offset * phase_id
    priors = (1.0 - cfg.prior_mix) * BASE_PRIORS + cfg.prior_mix * np.roll(BASE_PRIORS, phase_id)
    priors = priors / priors.sum()
    phase = PhaseParams(phase_id, means, priors, geometry_offset=1000 * phase_id)
    phase.validate(cfg.min_separation)
    return phase


def make_schedule(
    cfg: SceneConfig, total_rounds: int, phase_count: int = 3, starts=None, seed: int = 0
) -> DriftSchedule:
    if starts is None:
        starts = equal_phase_starts(total_rounds, phase_count)
    starts = tuple(int(s) for s in starts)
    phases = tuple(make_phase(cfg, i, seed) for i in range(len(starts)))
    return DriftSchedule(starts, phases, total_rounds)


@dataclass(frozen=True)
class LabeledScene:
    features: np.ndarray  # (H, W, F)
    labels: np.ndarray  # (H, W) uint8
    phase_id: int
    image_id: int

    @property
    def height(self) -> int:
        return self.labels.shape[0]

    @property
    def width(self) -> int:
        return self.labels.shape[1]

    def dominant_class(self) -> int:
        return int(np.argmax(np.bincount(self.labels.ravel(), minlength=len(CLASS_NAMES))))


def _layout(cfg: SceneConfig, priors: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    h, w = cfg.height, cfg.width
    band_p = priors[list(BAND_CLASSES)]
    fracs = rng.dirichlet(30.0 * band_p / band_p.sum())
    edges = np.rint(np.cumsum(fracs) * h).astype(int)
    edges[-1] = h
    labels = np.empty((h, w), dtype=np.uint8)
    top = 0
    for cls, bottom in zip(BAND_CLASSES, edges):
        labels[top:bottom, :] = cls
        top = max(top, bottom)

    # building band rows (may be empty)
    rows = np.flatnonzero(labels[:, 0] == BUILDING)
    n_veg = rng.binomial(2, min(1.0, 4.0 * priors[VEGETATION]))
    for _ in range(n_veg):
        if rows.size == 0:
            break
        ph = int(rng.integers(2, 5))
        pw = int(rng.integers(2, 6))
        bottom = rows[-1] + 1
        x0 = int(rng.integers(0, w - pw + 1))
        labels[max(0, bottom - ph) : bottom, x0 : x0 + pw] = VEGETATION

    road_rows = np.flatnonzero(labels[:, 0] == ROAD)
    anchor = road_rows[0] if road_rows.size else h - 2
    n_veh = rng.binomial(3, min(1.0, 4.0 * priors[VEHICLE]))
    for _ in range(n_veh):
        vh = int(rng.integers(2, 4))
        vw = int(rng.integers(3, 7))
        y0 = int(np.clip(anchor - vh // 2 + rng.integers(-1, 3), 0, h - vh))
        x0 = int(rng.integers(0, w - vw + 1))
        labels[y0 : y0 + vh, x0 : x0 + vw] = VEHICLE
    return labels


def generate_scene(cfg: SceneConfig, phase: PhaseParams, image_id: int, seed: int) -> LabeledScene:
    """Deterministic in (phase, image_id, seed)."""
    rng = np.random.default_rng([int(seed) & 0xFFFFFFFF, phase.geometry_offset, int(image_id)])
    labels = _layout(cfg, phase.priors, rng)
    noise = rng.standard_normal((cfg.height, cfg.width, cfg.feature_dim))
    features = phase.means[labels] + cfg.noise_sigma * noise
    return LabeledScene(features, labels, phase.phase_id, int(image_id))


def generate_scenes(cfg: SceneConfig, phase: PhaseParams, count: int, seed: int, first_id: int = 0):
    return [generate_scene(cfg, phase, first_id + i, seed) for i in range(count)]


@dataclass
class ClientShard:
    client_id: int
    scenes: list = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.scenes)


def partition(scenes: Sequence[LabeledScene], client_count: int, alpha: float, seed) -> list[ClientShard]:
    """Split images across clients with Dirichlet(alpha) proportions per dominant class.

    Every image lands in exactly one shard and no shard is empty.
    """
    if client_count < 1:
        raise ConfigError("client_count must be >= 1")
    if alpha <= 0:
        raise ConfigError("Dirichlet concentration must be positive")
    if len(scenes) < client_count:
        raise ConfigError(f"{len(scenes)} images cannot fill {client_count} clients")
    if client_count == 1:
        return [ClientShard(0, list(scenes))]

    rng = np.random.default_rng(seed)
    keys = np.array([s.dominant_class() for s in scenes])
    assignment = np.empty(len(scenes), dtype=np.int64)
    for key in np.unique(keys):
        idx = np.flatnonzero(keys == key)
        idx = idx[rng.permutation(idx.size)]
        props = rng.dirichlet(np.full(client_count, alpha))
        cuts = np.rint(np.cumsum(props)[:-1] * idx.size).astype(int)
        for c, part in enumerate(np.split(idx, cuts)):
            assignment[part] = c

    # refill empty shards from the largest one, deterministically
    counts = np.bincount(assignment, minlength=client_count)
    for c in np.flatnonzero(counts == 0):
        donor = int(np.argmax(counts))
        moved = np.flatnonzero(assignment == donor)[-1]
        assignment[moved] = c
        counts[donor] -= 1
        counts[c] += 1

    shards = [ClientShard(c) for c in range(client_count)]
    for i, c in enumerate(assignment):
        shards[c].scenes.append(scenes[i])
    return shards


# --- binary export -----------------------------------------------------------

SCENE_MAGIC = b"FSCN"
SCENE_VERSION = 1
_SCENE_HEADER = struct.Struct("<4sIIIII")  # magic, version, count, height, width, features


def export_scenes(scenes: Sequence[LabeledScene], path, manifest_extra: dict | None = None) -> Path:
    """Write scenes to ``path`` (binary) and ``path.json`` (manifest).

    Binary layout, little-endian: magic ``FSCN``, u32 version, u32 count,
    u32 height, u32 width, u32 features, then float64 features
    [count, height, width, features], then uint8 labels [count, height, width].
    """
    path = Path(path)
    if not scenes:
        raise ConfigError("nothing to export")
    h, w, f = scenes[0].features.shape
    feats = np.stack([s.features for s in scenes]).astype("<f8")
    labels = np.stack([s.labels for s in scenes]).astype(np.uint8)
    if feats.shape[1:] != (h, w, f):
        raise ConfigError("all exported scenes must share dimensions")
    payload = _SCENE_HEADER.pack(SCENE_MAGIC, SCENE_VERSION, len(scenes), h, w, f)
    payload += feats.tobytes() + labels.tobytes()
    path.write_bytes(payload)
    manifest = {
        "file": path.name,
        "format_version": SCENE_VERSION,
        "count": len(scenes),
        "height": h,
        "width": w,
        "feature_dim": f,
        "class_names": list(CLASS_NAMES),
        "phase_ids": [s.phase_id for s in scenes],
        "image_ids": [s.image_id for s in scenes],
        "sha256": hashlib.sha256(payload).hexdigest(),
    }
    if manifest_extra:
        manifest.update(manifest_extra)
    path.with_name(path.name + ".json").write_text(json.dumps(manifest, indent=2) + "\n")
    return path


def load_scenes(path) -> tuple[np.ndarray, np.ndarray]:
    """Read an exported scene file back as (features, labels) arrays."""
    data = Path(path).read_bytes()
    if len(data) < _SCENE_HEADER.size:
        raise ConfigError("scene file truncated in header")
    magic, version, n, h, w, f = _SCENE_HEADER.unpack_from(data)
    if magic != SCENE_MAGIC:
        raise ConfigError(f"bad scene file magic {magic!r}")
    if version != SCENE_VERSION:
        raise ConfigError(f"unsupported scene file version {version}")
    n_feat = n * h * w * f
    expected = _SCENE_HEADER.size + 8 * n_feat + n * h * w
    if len(data) != expected:
        raise ConfigError(f"scene file has {len(data)} bytes, expected {expected}")
    off = _SCENE_HEADER.size
    feats = np.frombuffer(data, dtype="<f8", count=n_feat, offset=off).reshape(n, h, w, f)
    labels = np.frombuffer(data, dtype=np.uint8, count=n * h * w, offset=off + 8 * n_feat)
    return feats.astype(np.float64), labels.reshape(n, h, w).copy()
