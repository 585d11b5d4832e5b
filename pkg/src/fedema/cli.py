"""Command-line entry point: ``fedema run | ablate | gradcheck | export-scenes``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import segnet
from .config import ExperimentConfig, load_config, save_config
from .errors import ConfigError, FedEMAError, OracleError
from .numerics import finite_diff_gradient, max_relative_error
from .orchestrator import build_context, run_experiment
from .persist import (
    METRIC_COLUMNS,
    csv_text,
    metric_rows,
    save_checkpoint,
    write_metrics_csv,
    write_report_json,
)
from .scenegen import export_scenes

log = logging.getLogger("fedema")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2
GRADCHECK_TOL = 1e-4
SUMMARY_COLUMNS = (
    "sweep_value",
    "rounds_to_threshold",
    "final_miou_cur",
    "final_miou_hist_mean",
    "forgetting",
    "final_mean_obj",
)


def _load(args) -> ExperimentConfig:
    try:
        cfg = load_config(args.config)
    except FileNotFoundError as exc:
        raise ConfigError(f"cannot read config: {exc}") from exc
    if getattr(args, "seed", None) is not None:
        cfg = replace(cfg, seed=args.seed)
    return cfg


def write_run(cfg: ExperimentConfig, out: Path):
    """Run one experiment and write metrics.csv, report.json, final.ckpt, config.json."""
    out.mkdir(parents=True, exist_ok=True)
    report = run_experiment(cfg)
    write_metrics_csv(report, out / "metrics.csv")
    write_report_json(report, out / "report.json")
    save_config(cfg, out / "config.json")
    save_checkpoint(
        out / "final.ckpt",
        report.final_params,
        {"round": cfg.rounds, "algorithm": cfg.algorithm, "config_hash": cfg.config_hash()},
    )
    return report


def cmd_run(args) -> int:
    cfg = _load(args)
    report = write_run(cfg, Path(args.out))
    last = report.records[-1]
    log.info(
        "%s: %d rounds, final mIoU %.4f, forgetting %s",
        cfg.algorithm, len(report.records), last.ema_current.miou, report.forgetting(),
    )
    return EXIT_OK


def _parse_values(axis: str, raw: str) -> list:
    parts = [p.strip() for p in raw.split(",") if p.strip()]
    if not parts:
        raise ConfigError("--values is empty")
    try:
        if axis == "window":
            vals = [int(p) for p in parts]
        else:
            vals = [float(p) for p in parts]
    except ValueError as exc:
        raise ConfigError(f"bad --values for axis {axis}: {exc}") from exc
    return vals


def _sweep_config(cfg: ExperimentConfig, axis: str, value) -> ExperimentConfig:
    if cfg.algorithm != "fedema":
        raise ConfigError("ablation sweeps apply to fedema configs")
    if axis == "lambda":
        return replace(cfg, lam=float(value))
    return replace(cfg, window=int(value), beta=None)


def cmd_ablate(args) -> int:
    cfg = _load(args)
    values = _parse_values(args.axis, args.values)
    configs = [(v, _sweep_config(cfg, args.axis, v)) for v in values]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows, summary, failures = [], [], []
    for value, sub in configs:
        key = repr(value)
        try:
            report = write_run(sub, out / f"{args.axis}={key}")
        except FedEMAError as exc:
            log.error("%s=%s failed: %s", args.axis, key, exc)
            failures.append(key)
            continue
        for row in metric_rows(report):
            rows.append({"sweep_value": key, **row})
        last = report.records[-1]
        hist = last.historical_miou
        summary.append(
            {
                "sweep_value": key,
                "rounds_to_threshold": str(report.rounds_to_threshold()),
                "final_miou_cur": repr(last.ema_current.miou),
                "final_miou_hist_mean": repr(last.ema_current.miou if hist is None else hist),
                "forgetting": repr(report.forgetting() or 0.0),
                "final_mean_obj": repr(last.mean_objective),
            }
        )
    (out / "ablation.csv").write_text(csv_text(rows, ("sweep_value",) + METRIC_COLUMNS))
    (out / "ablation_summary.csv").write_text(csv_text(summary, SUMMARY_COLUMNS))
    if failures:
        log.error("failed sweep values: %s", ", ".join(failures))
        return EXIT_FAIL
    return EXIT_OK


def gradcheck(seed: int = 0, draws: int = 5, grad_fn=None) -> tuple[float, list[str]]:
    """Compare analytic gradients with central differences on random small models.

    ``grad_fn`` replaces the analytic gradient (a test hook for negative controls).
    """
    grad_fn = grad_fn or segnet.backward
    cfg = segnet.ModelConfig(feature_dim=3, hidden_dim=4, class_count=3)
    rng = np.random.default_rng(seed)
    worst, lines = 0.0, []
    for i in range(draws):
        params = rng.normal(0.0, 0.8, size=cfg.param_count)
        feats = rng.normal(0.0, 1.5, size=(12, cfg.feature_dim))
        labels = rng.integers(0, cfg.class_count, size=12)
        batch = segnet.Batch(feats, labels)
        lam = float(rng.choice([0.0, 0.002, 0.01]))
        sign = int(rng.choice([1, -1]))
        analytic = grad_fn(params, batch, cfg, lam, sign)
        numeric = finite_diff_gradient(lambda w: segnet.objective(w, batch, cfg, lam, sign), params, h=1e-5)
        err = max_relative_error(analytic, numeric)
        worst = max(worst, err)
        lines.append(f"draw {i}: lambda={lam:g} sign={sign:+d} max_rel_err={err:.3e}")
    lines.append(f"max relative error {worst:.3e} (tolerance {GRADCHECK_TOL:g})")
    return worst, lines


def _corrupted_backward(params, batch, cfg, lam, sign):
    g = segnet.backward(params, batch, cfg, lam, sign)
    g[0] += 1e-2 * (1.0 + abs(g[0]))
    return g


def cmd_gradcheck(args) -> int:
    try:
        worst, lines = gradcheck(args.seed, grad_fn=_corrupted_backward if args.corrupt else None)
    except OracleError as exc:
        print(f"gradcheck: oracle failure: {exc}", file=sys.stderr)
        return EXIT_FAIL
    for line in lines:
        print(line)
    return EXIT_OK if worst <= GRADCHECK_TOL else EXIT_FAIL


def cmd_export_scenes(args) -> int:
    cfg = _load(args)
    ctx = build_context(cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i, ev in enumerate(ctx.evals):
        scenes = list(ev.scenes[: args.count]) if args.count else list(ev.scenes)
        export_scenes(
            scenes,
            out / f"phase{i}_eval.bin",
            {"seed": cfg.seed, "phase": i, "config_hash": cfg.config_hash()},
        )
    return EXIT_OK


def cmd_default_config(args) -> int:
    cfg = ExperimentConfig()
    if args.out:
        save_config(cfg, args.out)
    else:
        print(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedema", description=__doc__)
    parser.add_argument("--quiet", action="store_true", help="only print errors")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--quiet", action="store_true", default=argparse.SUPPRESS)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", parents=[common], help="run one experiment")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("ablate", parents=[common], help="sweep lambda or window size")
    p.add_argument("--config", required=True)
    p.add_argument("--axis", required=True, choices=("lambda", "window"))
    p.add_argument("--values", required=True, help="comma-separated, e.g. 0,0.002,0.01")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("gradcheck", parents=[common], help="analytic vs finite-difference gradients")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--corrupt", action="store_true", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("export-scenes", parents=[common], help="write each phase's evaluation scenes")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--count", type=int, default=0, help="images per phase (0 = all)")
    p.set_defaults(func=cmd_export_scenes)

    p = sub.add_parser("default-config", parents=[common], help="print or write the default config")
    p.add_argument("--out")
    p.set_defaults(func=cmd_default_config)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.ERROR if args.quiet else logging.INFO, format="%(levelname)s %(message)s", force=True
    )
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"fedema: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FedEMAError as exc:
        print(f"fedema: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
