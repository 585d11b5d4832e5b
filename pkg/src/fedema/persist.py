"""On-disk formats: per-round CSV, JSON report, binary checkpoints."""

from __future__ import annotations

import csv
import io
import json
import struct
from pathlib import Path

import numpy as np

from .errors import CheckpointError

METRIC_COLUMNS = (
    "round",
    "algo",
    "lambda",
    "window",
    "miou_cur",
    "miou_hist_mean",
    "mf1",
    "mpre",
    "mrec",
    "mean_obj",
    "grad_norm_sq",
)


def _num(x) -> str:
    # repr round-trips float64 exactly, so equal numbers give equal bytes
    return repr(float(x))


def metric_rows(report) -> list[dict]:
    cfg = report.config
    rows = []
    for rec in report.records:
        cur = rec.ema_current
        hist = rec.historical_miou
        rows.append(
            {
                "round": str(rec.round),
                "algo": cfg.algorithm,
                "lambda": _num(cfg.lam),
                "window": str(cfg.window_label),
                "miou_cur": _num(cur.miou),
                "miou_hist_mean": _num(cur.miou if hist is None else hist),
                "mf1": _num(cur.mf1),
                "mpre": _num(cur.mprecision),
                "mrec": _num(cur.mrecall),
                "mean_obj": _num(rec.mean_objective),
                "grad_norm_sq": _num(rec.grad_norm_sq),
            }
        )
    return rows


def csv_text(rows, columns) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(columns), lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    return buf.getvalue()


def write_metrics_csv(report, path) -> Path:
    path = Path(path)
    path.write_text(csv_text(metric_rows(report), METRIC_COLUMNS))
    return path


def read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def write_report_json(report, path) -> Path:
    path = Path(path)
    path.write_text(json.dumps(report.to_dict(), indent=2, allow_nan=False) + "\n")
    return path


# --- checkpoints -------------------------------------------------------------

CKPT_MAGIC = b"FEMA"
CKPT_VERSION = 1
_HEAD = struct.Struct("<4sIQ")  # magic, u32 version, u64 parameter count
_TRAILER_LEN = struct.Struct("<I")


def save_checkpoint(path, params, metadata: dict) -> Path:
    """Layout (little-endian): ``FEMA``, u32 version, u64 count, count float64
    values, u32 trailer length, UTF-8 JSON trailer."""
    params = np.ascontiguousarray(params, dtype="<f8")
    trailer = json.dumps(metadata, sort_keys=True).encode()
    blob = (
        _HEAD.pack(CKPT_MAGIC, CKPT_VERSION, params.size)
        + params.tobytes()
        + _TRAILER_LEN.pack(len(trailer))
        + trailer
    )
    path = Path(path)
    path.write_bytes(blob)
    return path


def load_checkpoint(path, expected_hash: str | None = None) -> tuple[np.ndarray, dict]:
    data = Path(path).read_bytes()
    if len(data) < 4 or data[:4] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    if len(data) < _HEAD.size:
        raise CheckpointError(f"{path}: truncated header")
    _, version, count = _HEAD.unpack_from(data)
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    end = _HEAD.size + 8 * count
    if len(data) < end + _TRAILER_LEN.size:
        raise CheckpointError(f"{path}: truncated parameter array (expected {count} values)")
    (tlen,) = _TRAILER_LEN.unpack_from(data, end)
    trailer = data[end + _TRAILER_LEN.size :]
    if len(trailer) != tlen:
        raise CheckpointError(f"{path}: truncated metadata trailer")
    try:
        meta = json.loads(trailer.decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt metadata trailer") from exc
    if expected_hash is not None and meta.get("config_hash") != expected_hash:
        raise CheckpointError(f"{path}: config hash does not match this run")
    params = np.frombuffer(data, dtype="<f8", count=count, offset=_HEAD.size).astype(np.float64)
    return params, meta
