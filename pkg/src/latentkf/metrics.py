"""Benchmark metrics: squared-error scores in decibels and the CSV schema.

Errors are squared L2 norms of the estimate-minus-truth vector, restricted
to the coordinates a study reports on (the pendulum benchmark scores the
angle only). Per-trajectory means aggregate into a single dB figure, and the
spread column is the sample standard deviation of the per-trajectory dB
values. Step 0 carries the (shared) initialization and is excluded.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

CSV_SCHEMA_VERSION = 1
CSV_COLUMNS = ("variant", "noise_level", "mse_db", "std_db", "latency_us_per_step",
               "param_count", "op_count", "seed", "config_hash")


class MetricsFormatError(ValueError):
    """metrics.csv is malformed; message carries the offending line number."""


def per_trajectory_mse(estimates: np.ndarray, truth: np.ndarray,
                       coords=None, skip_first: int = 1) -> np.ndarray:
    """Mean squared error of each trajectory; arrays are (D, T, m)."""
    est = np.asarray(estimates, dtype=np.float64)
    tru = np.asarray(truth, dtype=np.float64)
    if est.shape != tru.shape:
        raise ValueError(f"estimates {est.shape} and truth {tru.shape} differ")
    err = est[:, skip_first:] - tru[:, skip_first:]
    if coords is not None:
        err = err[..., list(coords)]
    return np.mean(np.sum(err ** 2, axis=-1), axis=-1)


def mse_db(estimates: np.ndarray, truth: np.ndarray, coords=None,
           skip_first: int = 1) -> tuple[float, float]:
    """Returns (overall dB, std of per-trajectory dB values)."""
    per_traj = per_trajectory_mse(estimates, truth, coords, skip_first)
    with np.errstate(divide="ignore"):
        overall = float(10.0 * np.log10(np.mean(per_traj)))
        if per_traj.size > 1:
            db_vals = 10.0 * np.log10(per_traj)
            spread = float(np.std(db_vals, ddof=1))
        else:
            spread = 0.0
    return overall, spread


def to_db(mse: float) -> float:
    return 10.0 * math.log10(mse)


@dataclass
class MetricRecord:
    variant: str
    noise_level: float
    mse_db: float
    std_db: float
    latency_us_per_step: float = float("nan")
    param_count: int = 0
    op_count: int = 0
    seed: int = 0
    config_hash: str = ""

    def row(self) -> list[str]:
        return [
            self.variant,
            _fmt(self.noise_level),
            _fmt(self.mse_db),
            _fmt(self.std_db),
            _fmt(self.latency_us_per_step),
            str(self.param_count),
            str(self.op_count),
            str(self.seed),
            self.config_hash,
        ]


def _fmt(x: float) -> str:
    if isinstance(x, float) and math.isnan(x):
        return ""
    return f"{x:.6g}"


def write_metrics_csv(records: list[MetricRecord], path: str) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_COLUMNS)
        for rec in records:
            writer.writerow(rec.row())


def read_metrics_csv(path: str) -> list[MetricRecord]:
    records = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != list(CSV_COLUMNS):
            raise MetricsFormatError(f"line 1: unexpected header {header}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(CSV_COLUMNS):
                raise MetricsFormatError(f"line {lineno}: expected {len(CSV_COLUMNS)} fields, got {len(row)}")
            try:
                records.append(MetricRecord(
                    variant=row[0],
                    noise_level=float(row[1]),
                    mse_db=float(row[2]),
                    std_db=float(row[3]),
                    latency_us_per_step=float(row[4]) if row[4] else float("nan"),
                    param_count=int(row[5]) if row[5] else 0,
                    op_count=int(row[6]) if row[6] else 0,
                    seed=int(row[7]) if row[7] else 0,
                    config_hash=row[8],
                ))
            except ValueError as err:
                raise MetricsFormatError(f"line {lineno}: {err}") from err
    return records
