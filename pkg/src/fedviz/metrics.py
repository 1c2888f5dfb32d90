"""Accuracy metrics and sweep harness for comparing schemes against exact results."""

from __future__ import annotations

import csv
import dataclasses
import io
import time
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .features import FeatureVector


class DegenerateExact(ValueError):
    """Relative error is undefined when the exact vector sums to zero magnitude."""


class InvalidDistribution(ValueError):
    """JSD needs non-negative vectors with positive sums."""


def relative_error(exact: FeatureVector, approx: FeatureVector) -> float:
    """RE = sum |y - yhat| / sum |y|."""
    y = np.asarray(exact.values, dtype=np.float64)
    yhat = np.asarray(approx.values, dtype=np.float64)
    if y.shape != yhat.shape:
        raise ValueError(f"length mismatch: {y.shape} vs {yhat.shape}")
    denom = np.sum(np.abs(y))
    if denom == 0:
        raise DegenerateExact("exact vector has zero total magnitude")
    return float(np.sum(np.abs(y - yhat)) / denom)


def jsd(exact: FeatureVector, approx: FeatureVector) -> float:
    """Jensen-Shannon divergence, log base 2, between the normalized vectors.

    Both inputs are normalized to distributions internally; zero-probability
    bins contribute zero (the 0*log0 convention). Bounded in [0, 1].
    """
    p = np.asarray(exact.values, dtype=np.float64)
    q = np.asarray(approx.values, dtype=np.float64)
    if p.shape != q.shape:
        raise ValueError(f"length mismatch: {p.shape} vs {q.shape}")
    if np.any(p < 0) or np.any(q < 0):
        raise InvalidDistribution("negative entries")
    if p.sum() <= 0 or q.sum() <= 0:
        raise InvalidDistribution("zero-sum vector")
    p = p / p.sum()
    q = q / q.sum()
    m = (p + q) / 2.0

    def kl(a: np.ndarray, b: np.ndarray) -> float:
        nz = a > 0
        return float(np.sum(a[nz] * np.log2(a[nz] / b[nz])))

    return 0.5 * kl(p, m) + 0.5 * kl(q, m)


@dataclass(frozen=True)
class AccuracyReport:
    """One measured grid point: both metrics plus the configuration that produced them."""

    jsd: float
    re: float
    n_features: int
    rounds: int
    epochs: int
    n_clients: int
    granularity: str
    distribution: str
    seed: int
    elapsed_s: float = 0.0

    def __post_init__(self) -> None:
        if not 0.0 <= self.jsd <= 1.0 + 1e-12:
            raise ValueError(f"jsd {self.jsd} outside [0, 1]")
        if self.re < 0:
            raise ValueError("re must be non-negative")


SWEEP_AXES = ("rounds", "epochs", "clients", "granularity", "distribution")

CSV_FIELDS = [
    "axis",
    "point",
    "seed",
    "rounds",
    "epochs",
    "n_clients",
    "granularity",
    "distribution",
    "n_features",
    "jsd",
    "re",
    "elapsed_s",
]


@dataclass
class SweepResult:
    axis: str
    rows: list[dict] = field(default_factory=list)

    def to_csv(self, include_timings: bool = True) -> str:
        """One row per (grid point, seed); stable column order."""
        buf = io.StringIO()
        fields = CSV_FIELDS if include_timings else CSV_FIELDS[:-1]
        w = csv.DictWriter(buf, fieldnames=fields, extrasaction="ignore", lineterminator="\n")
        w.writeheader()
        for row in self.rows:
            w.writerow(row)
        return buf.getvalue()

    def median_re_by_point(self) -> dict:
        points: dict = {}
        for row in self.rows:
            points.setdefault(row["point"], []).append(row["re"])
        return {k: float(np.median(v)) for k, v in points.items()}


def sweep(
    axis: str,
    grid: Sequence,
    run_point: Callable[[str, object, int], AccuracyReport],
    seeds: Sequence[int] = (0, 1, 2, 3, 4),
) -> SweepResult:
    """Run ``run_point(axis, point, seed)`` over the grid x seeds, collecting reports.

    The experiment body is injected so the harness stays independent of which
    pipeline produced the numbers (see cli.run_experiment_point for the real one).
    """
    if axis not in SWEEP_AXES:
        raise ValueError(f"unknown sweep axis {axis!r}; pick one of {SWEEP_AXES}")
    result = SweepResult(axis=axis)
    for point in grid:
        for seed in seeds:
            t0 = time.monotonic()
            report = run_point(axis, point, seed)
            elapsed = time.monotonic() - t0
            row = dataclasses.asdict(report)
            row["axis"] = axis
            row["point"] = str(point)
            if row.get("elapsed_s", 0.0) == 0.0:
                row["elapsed_s"] = elapsed
            result.rows.append(row)
    return result
