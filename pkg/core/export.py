"""Artifact writers and readers.

CSV payloads go through pandas with a fixed float format and "\\n" line endings so that
identical numbers always give identical bytes.
"""

import json
import logging
import math
import os

import numpy as np
import pandas as pd

from lab.bemetrics import BECurve, StandardizedSample
from lab.chain import Trajectory
from lab.errors import SchemaError

log = logging.getLogger("Pipeline")

FLOAT_FORMAT = "%.17g"
TRAJECTORY_COLUMNS = ["k", "x"]
ESTIMATION_COLUMNS = ["theta_id", "n", "seed", "estimator", "alpha_hat", "criterion_value", "m_prime_at_hat"]
CURVE_COLUMNS = ["scope", "estimator", "n", "R", "D", "slope", "intercept", "correction"]
SAMPLE_COLUMNS = ["theta_id", "n", "rep", "value"]


def _ensure_parent(path) -> None:
    parent = os.path.dirname(os.fspath(path))
    if parent:
        os.makedirs(parent, exist_ok=True)


def _write_frame(frame: pd.DataFrame, path) -> str:
    _ensure_parent(path)
    frame.to_csv(path, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")
    log.debug("wrote %d rows to %s", len(frame), path)
    return os.fspath(path)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        value = float(obj)
        return value if math.isfinite(value) else None
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def write_json(payload, path) -> str:
    _ensure_parent(path)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(_jsonable(payload), f, indent=2, sort_keys=True, allow_nan=False)
        f.write("\n")
    log.debug("wrote %s", path)
    return os.fspath(path)


def write_trajectory(traj: Trajectory, path) -> str:
    frame = pd.DataFrame({"k": np.arange(traj.x.size), "x": traj.x})
    return _write_frame(frame, path)


def write_estimations(rows: list[dict], path) -> str:
    return _write_frame(pd.DataFrame(rows, columns=ESTIMATION_COLUMNS), path)


def write_curves(curves: list[BECurve], path) -> str:
    rows = [row for curve in curves for row in curve.to_rows()]
    return _write_frame(pd.DataFrame(rows, columns=CURVE_COLUMNS), path)


def write_samples(samples: list[StandardizedSample], path) -> str:
    frames = [
        pd.DataFrame({
            "theta_id": s.theta_id,
            "n": s.n,
            "rep": s.rep_index,
            "value": s.values,
        })
        for s in samples
    ]
    frame = pd.concat(frames, ignore_index=True) if frames else pd.DataFrame(columns=SAMPLE_COLUMNS)
    return _write_frame(frame[SAMPLE_COLUMNS], path)


def read_curves(path) -> list[BECurve]:
    """Parse a BECurve CSV back into curves, one per (scope, estimator, correction)."""
    try:
        frame = pd.read_csv(path, dtype={"scope": str, "estimator": str, "correction": str})
    except (pd.errors.EmptyDataError, pd.errors.ParserError, UnicodeDecodeError) as e:
        raise SchemaError(f"cannot parse {path}: {e}") from e
    for column in CURVE_COLUMNS:
        if column not in frame.columns:
            raise SchemaError(f"missing from {path}", column=column)
    extra = [c for c in frame.columns if c not in CURVE_COLUMNS]
    if extra:
        raise SchemaError(f"unexpected in {path}", column=extra[0])
    for column in ("n", "R", "D"):
        if not pd.api.types.is_numeric_dtype(frame[column]):
            raise SchemaError(f"non-numeric values in {path}", column=column)

    curves = []
    for (scope, estimator, correction), group in frame.groupby(["scope", "estimator", "correction"], sort=False):
        first = group.iloc[0]
        curves.append(BECurve(
            points=tuple(zip(group["n"].astype(int), group["D"].astype(float))),
            theta_scope=scope,
            estimator=estimator,
            R=int(first["R"]),
            slope=float(first["slope"]) if pd.notna(first["slope"]) else math.nan,
            intercept=float(first["intercept"]) if pd.notna(first["intercept"]) else math.nan,
            correction=correction,
        ))
    return curves
