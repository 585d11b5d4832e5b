"""Round loop for FedEMA and the FedAvg / FedProx baselines.

Each round: send the current EMA model to every client, train locally for
tau steps, aggregate by data size, fuse into the EMA, evaluate.
"""

from __future__ import annotations

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Sequence

import numpy as np
from scipy.stats import kendalltau

from . import segnet
from .aggregator import ServerState, data_weights, unrolled_ema
from .config import ExperimentConfig
from .errors import FedEMAError, NotApplicableError, RoundError
from .metrics import MetricBundle, evaluate_labels, forgetting_score
from .scenegen import DriftSchedule, generate_scenes, make_schedule, partition
from .segnet import Batch
from .vehicle import local_train

log = logging.getLogger(__name__)

# stream tags for seed derivation
_POOL, _PARTITION, _LOCAL, _EVAL, _EVAL_PARTITION, _SCHEDULE = range(1, 7)


def derive_seed(seed: int, *keys: int) -> int:
    """Independent 64-bit seed for a (seed, purpose, ...) key."""
    ss = np.random.SeedSequence([int(seed), *[int(k) for k in keys]])
    return int(ss.generate_state(2, dtype=np.uint32).view(np.uint64)[0])


@dataclass(frozen=True)
class PhaseEval:
    scenes: tuple
    features: np.ndarray  # (images * pixels, F)
    labels: tuple  # per-image flat ground truth
    client_batches: tuple  # Batch per client, for the gradient-norm estimate
    client_weights: np.ndarray


@dataclass(frozen=True)
class Context:
    schedule: DriftSchedule
    evals: tuple  # PhaseEval per phase


@lru_cache(maxsize=16)
def build_context(cfg: ExperimentConfig) -> Context:
    schedule = make_schedule(
        cfg.scene, cfg.rounds, cfg.phases, cfg.phase_starts, derive_seed(cfg.seed, _SCHEDULE)
    )
    evals = []
    for i, phase in enumerate(schedule.phases):
        scenes = generate_scenes(
            cfg.scene, phase, cfg.eval_images, derive_seed(cfg.seed, _EVAL, i), first_id=10**9 + i * 10**6
        )
        shards = partition(scenes, cfg.clients, cfg.partition_alpha, derive_seed(cfg.seed, _EVAL_PARTITION, i))
        evals.append(
            PhaseEval(
                scenes=tuple(scenes),
                features=np.concatenate([s.features.reshape(-1, cfg.scene.feature_dim) for s in scenes]),
                labels=tuple(s.labels.ravel() for s in scenes),
                client_batches=tuple(Batch.from_scenes(sh.scenes) for sh in shards),
                client_weights=data_weights([len(sh) for sh in shards]),
            )
        )
    return Context(schedule, tuple(evals))


def evaluate_model(params, phase_eval: PhaseEval, cfg: ExperimentConfig) -> MetricBundle:
    pred = segnet.predict(params, phase_eval.features, cfg.model_config)
    per_image = np.split(pred, len(phase_eval.labels))
    return evaluate_labels(per_image, phase_eval.labels, cfg.scene.class_count)


def grad_norm_estimate(params, batches: Sequence[Batch], weights, model_cfg) -> float:
    """||sum_c p_c grad L_c(params)||^2 with the unregularised cross-entropy."""
    if not batches:
        raise NotApplicableError("gradient-norm estimate needs at least one batch")
    weights = np.asarray(weights, dtype=np.float64)
    total = np.zeros(model_cfg.param_count)
    for w, batch in zip(weights, batches):
        total = total + w * segnet.backward(params, batch, model_cfg, 0.0, 1)
    return float(total @ total)


@dataclass
class RoundRecord:
    round: int
    phase: int
    mean_objective: float
    client_objectives: list[float]
    weights: list[float]
    ema_metrics: dict[int, MetricBundle]
    agg_metrics: dict[int, MetricBundle]
    grad_norm_sq: float
    wall_time: float = 0.0
    evaluated: bool = True

    @property
    def ema_current(self) -> MetricBundle:
        return self.ema_metrics[self.phase]

    @property
    def historical_miou(self) -> float | None:
        """Mean EMA-model mIoU over phases before the current one."""
        past = [self.ema_metrics[p].miou for p in range(self.phase)]
        return float(np.mean(past)) if past else None

    def to_dict(self) -> dict:
        return {
            "round": self.round,
            "phase": self.phase,
            "mean_objective": self.mean_objective,
            "client_objectives": self.client_objectives,
            "weights": self.weights,
            "ema_metrics": {str(k): v.as_dict() for k, v in self.ema_metrics.items()},
            "agg_metrics": {str(k): v.as_dict() for k, v in self.agg_metrics.items()},
            "grad_norm_sq": self.grad_norm_sq,
            "wall_time": self.wall_time,
            "evaluated": self.evaluated,
        }


@dataclass
class ConvergenceSummary:
    running_mean: list[float]
    kendall_tau: float
    quarter_round: int
    running_mean_quarter: float
    running_mean_final: float
    improved: bool

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def convergence_summary(values: Sequence[float]) -> ConvergenceSummary:
    """Running mean of per-round grad-norm^2 and its monotone trend."""
    values = np.asarray(values, dtype=np.float64)
    if values.size < 10:
        raise NotApplicableError(f"convergence summary needs >= 10 rounds, got {values.size}")
    running = np.cumsum(values) / np.arange(1, values.size + 1)
    if np.all(running == running[0]):
        tau = 0.0
    else:
        tau = float(kendalltau(np.arange(running.size), running).statistic)
        if not np.isfinite(tau):
            tau = 0.0
    quarter = max(1, values.size // 4)
    return ConvergenceSummary(
        running_mean=running.tolist(),
        kendall_tau=tau,
        quarter_round=quarter,
        running_mean_quarter=float(running[quarter - 1]),
        running_mean_final=float(running[-1]),
        improved=bool(running[-1] < running[quarter - 1]),
    )


def initial_state(cfg: ExperimentConfig) -> ServerState:
    w0 = segnet.init_params(cfg.model_config)
    return ServerState(round_index=0, ema=w0, beta=cfg.effective_beta)


def round_shards(cfg: ExperimentConfig, r: int, ctx: Context | None = None):
    """The fresh per-client data drawn for round r."""
    ctx = ctx or build_context(cfg)
    phase = ctx.schedule.phases[ctx.schedule.phase_index(r)]
    pool = generate_scenes(
        cfg.scene, phase, cfg.clients * cfg.images_per_client, derive_seed(cfg.seed, _POOL, r), first_id=r * 10**6
    )
    return partition(pool, cfg.clients, cfg.partition_alpha, derive_seed(cfg.seed, _PARTITION, r))


def run_round(state: ServerState, cfg: ExperimentConfig, r: int, ctx: Context | None = None):
    """Execute round r from ``state``; returns ``(new_state, record, client_reports)``.

    The input state is left untouched.
    """
    t0 = time.perf_counter()
    ctx = ctx or build_context(cfg)
    if r != state.round_index + 1:
        raise FedEMAError(f"state is at round {state.round_index}, cannot run round {r}")
    phase_idx = ctx.schedule.phase_index(r)
    shards = round_shards(cfg, r, ctx)
    weights = data_weights([len(s) for s in shards])
    start = state.ema.copy()
    start.flags.writeable = False
    model_cfg = cfg.model_config
    objective = cfg.local_objective

    def train(c):
        return local_train(
            start, shards[c].scenes, model_cfg, cfg.tau, objective, cfg.optimizer,
            derive_seed(cfg.seed, _LOCAL, r, c), cfg.batch_images,
        )

    if cfg.workers > 1:
        with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
            reports = list(pool.map(train, range(cfg.clients)))
    else:
        reports = [train(c) for c in range(cfg.clients)]

    new_state = ServerState(state.round_index, state.ema.copy(), state.beta, state.weights, state.last_aggregate)
    agg = new_state.step([rep.params for rep in reports], weights)

    client_obj = [rep.mean_objective for rep in reports]
    evaluated = r % cfg.eval_every == 0 or r == cfg.rounds or r in ctx.schedule.starts
    ema_m, agg_m = {}, {}
    if evaluated:
        for p in range(phase_idx + 1):
            ema_m[p] = evaluate_model(new_state.ema, ctx.evals[p], cfg)
            agg_m[p] = evaluate_model(agg, ctx.evals[p], cfg)
    cur = ctx.evals[phase_idx]
    gns = grad_norm_estimate(new_state.ema, cur.client_batches, cur.client_weights, model_cfg)
    record = RoundRecord(
        round=r,
        phase=phase_idx,
        mean_objective=float(np.mean(client_obj)),
        client_objectives=client_obj,
        weights=weights.tolist(),
        ema_metrics=ema_m,
        agg_metrics=agg_m,
        grad_norm_sq=gns,
        wall_time=time.perf_counter() - t0,
        evaluated=evaluated,
    )
    return new_state, record, reports


@dataclass
class ExperimentReport:
    config: ExperimentConfig
    records: list[RoundRecord] = field(default_factory=list)
    initial_params: np.ndarray | None = None
    final_params: np.ndarray | None = None
    aggregates: list[np.ndarray] = field(default_factory=list)
    ema_history: list[np.ndarray] = field(default_factory=list)
    error: str | None = None

    @property
    def complete(self) -> bool:
        return self.error is None and len(self.records) == self.config.rounds

    def phase_histories(self) -> list[list[float]]:
        """EMA mIoU on each phase's eval set, from that phase's start to the last record."""
        hist: dict[int, list[float]] = {}
        for rec in self.records:
            for p, bundle in rec.ema_metrics.items():
                hist.setdefault(p, []).append(bundle.miou)
        return [hist[p] for p in sorted(hist)]

    def forgetting(self) -> float | None:
        h = self.phase_histories()
        return forgetting_score(h) if len(h) >= 2 else None

    def final_historical_miou(self) -> float | None:
        return self.records[-1].historical_miou if self.records else None

    def convergence(self) -> ConvergenceSummary | None:
        if len(self.records) < 10:
            return None
        return convergence_summary([rec.grad_norm_sq for rec in self.records])

    def rounds_to_threshold(self, threshold: float | None = None) -> int:
        """First round whose mean objective is <= threshold; rounds + 1 if never."""
        threshold = self.config.objective_threshold if threshold is None else threshold
        for rec in self.records:
            if rec.mean_objective <= threshold:
                return rec.round
        return self.config.rounds + 1

    def unrolled_audit(self) -> float:
        """Max abs gap between the recorded final EMA and its closed-form unrolling."""
        closed = unrolled_ema(self.initial_params, self.aggregates, self.config.effective_beta)
        return float(np.max(np.abs(closed - self.final_params)))

    def to_dict(self) -> dict:
        conv = self.convergence()
        return {
            "config": self.config.to_dict(),
            "config_hash": self.config.config_hash(),
            "complete": self.complete,
            "error": self.error,
            "effective_beta": self.config.effective_beta,
            "records": [rec.to_dict() for rec in self.records],
            "forgetting_score": self.forgetting(),
            "final_historical_miou": self.final_historical_miou(),
            "rounds_to_threshold": self.rounds_to_threshold(),
            "convergence": conv.to_dict() if conv else None,
        }


def run_experiment(cfg: ExperimentConfig) -> ExperimentReport:
    """Run all rounds; on failure raise RoundError with ``.report`` holding the partial run."""
    ctx = build_context(cfg)
    state = initial_state(cfg)
    report = ExperimentReport(cfg, initial_params=state.ema.copy())
    for r in range(1, cfg.rounds + 1):
        try:
            state, record, _ = run_round(state, cfg, r, ctx)
        except Exception as exc:
            report.error = f"round {r}: {exc}"
            report.final_params = state.ema.copy()
            err = RoundError(r, exc)
            err.report = report
            raise err from exc
        if not record.evaluated and report.records:
            prev = report.records[-1]
            record.ema_metrics = dict(prev.ema_metrics)
            record.agg_metrics = dict(prev.agg_metrics)
        report.records.append(record)
        report.aggregates.append(state.last_aggregate.copy())
        report.ema_history.append(state.ema.copy())
        log.debug("round %d phase %d obj %.4f", r, record.phase, record.mean_objective)
    report.final_params = state.ema.copy()
    return report
