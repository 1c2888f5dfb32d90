"""Turn a reconstructed global feature vector into chart-ready structures.

Exact sums (query scheme) pass through untouched; model outputs (prediction
scheme) are per-client averages and get multiplied by the client count first.
Everything here is a reshape plus labels; rendering lives in the UI.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .features import Category1D, FeatureVector, Grid2D, OD4D, PartitionSpec, Time1D, TreeLeaves

CHART_KINDS = (
    "Histogram",
    "StackedHistogram",
    "Heatmap",
    "ODMap",
    "Calendar",
    "Treemap",
    "Sankey",
    "Pie",
    "Line",
)

# chart kind -> partition kinds it can consume
_COMPATIBLE = {
    "Histogram": (Time1D, Category1D),
    "StackedHistogram": (Time1D, Category1D),
    "Calendar": (Time1D,),
    "Line": (Time1D, Category1D),
    "Pie": (Category1D, TreeLeaves),
    "Heatmap": (Grid2D,),
    "ODMap": (OD4D,),
    "Treemap": (TreeLeaves,),
    "Sankey": (Category1D,),
}


class SpecMismatch(ValueError):
    """Vector and chart spec disagree (wrong partition kind or length)."""


@dataclass(frozen=True)
class ChartSpec:
    """What to draw and from which partition; labels are pure metadata."""

    kind: str
    partition: PartitionSpec
    labels: tuple[str, ...] = ()
    axis_names: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if self.kind not in CHART_KINDS:
            raise ValueError(f"unknown chart kind {self.kind!r}")
        if not isinstance(self.partition.binning, _COMPATIBLE[self.kind]):
            raise SpecMismatch(
                f"{self.kind} cannot be drawn from a "
                f"{type(self.partition.binning).__name__} partition"
            )

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "partition": self.partition.to_dict(),
            "labels": list(self.labels),
            "axis_names": list(self.axis_names),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ChartSpec":
        return cls(
            kind=d["kind"],
            partition=PartitionSpec.from_dict(d["partition"]),
            labels=tuple(d.get("labels", ())),
            axis_names=tuple(d.get("axis_names", ())),
        )


@dataclass
class ChartData:
    """Numbers plus structure, ready for rendering: kind, shape, values, labels."""

    kind: str
    shape: tuple[int, ...]
    values: np.ndarray  # flat, length M of the source vector
    labels: tuple[str, ...] = ()
    axis_names: tuple[str, ...] = ()
    meta: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=np.float64)
        if int(np.prod(self.shape)) != len(self.values):
            raise SpecMismatch(f"shape {self.shape} does not hold {len(self.values)} values")
        if not np.all(np.isfinite(self.values)):
            raise SpecMismatch("chart values must be finite")

    def flatten(self) -> np.ndarray:
        """The source feature vector, recovered exactly."""
        return self.values.copy()

    def grid(self) -> np.ndarray:
        return self.values.reshape(self.shape)

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "shape": list(self.shape),
            "values": self.values.tolist(),
            "labels": list(self.labels),
            "axis_names": list(self.axis_names),
            "meta": self.meta,
        }

    def to_json(self) -> str:
        """Canonical text form; byte-stable for identical inputs."""
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_dict(cls, d: dict) -> "ChartData":
        return cls(
            kind=d["kind"],
            shape=tuple(d["shape"]),
            values=np.asarray(d["values"], dtype=np.float64),
            labels=tuple(d.get("labels", ())),
            axis_names=tuple(d.get("axis_names", ())),
            meta=d.get("meta", {}),
        )


def _shape_for(spec: ChartSpec) -> tuple[int, ...]:
    b = spec.partition.binning
    if isinstance(b, Grid2D):
        return (b.rows, b.cols)
    if isinstance(b, OD4D):
        return (b.o_rows, b.o_cols, b.d_rows, b.d_cols)
    return (spec.partition.num_bins,)


def _labels_for(spec: ChartSpec) -> tuple[str, ...]:
    if spec.labels:
        return spec.labels
    b = spec.partition.binning
    if isinstance(b, TreeLeaves):
        return b.leaves
    if isinstance(b, Category1D):
        return b.categories
    return ()


def compose_query(sum_vector: FeatureVector, spec: ChartSpec) -> ChartData:
    """Exact path: values pass through unchanged, only reshaped per chart kind."""
    if len(sum_vector) != spec.partition.num_bins:
        raise SpecMismatch(
            f"vector length {len(sum_vector)} != partition bins {spec.partition.num_bins}"
        )
    pid = spec.partition.spec_id
    if sum_vector.spec_id and sum_vector.spec_id != pid:
        raise SpecMismatch(f"vector from partition {sum_vector.spec_id}, chart wants {pid}")
    return ChartData(
        kind=spec.kind,
        shape=_shape_for(spec),
        values=sum_vector.values,
        labels=_labels_for(spec),
        axis_names=spec.axis_names,
        meta={"exact": True},
    )


def compose_prediction(
    global_model_output: FeatureVector, n_clients: int, spec: ChartSpec
) -> ChartData:
    """Approximate path: the model predicts per-client averages, so scale by N."""
    if n_clients < 1:
        raise SpecMismatch("client count must be >= 1")
    scaled = FeatureVector(global_model_output.spec_id, global_model_output.values * n_clients)
    chart = compose_query(scaled, spec)
    chart.meta = {"exact": False, "n_clients": n_clients}
    return chart


def diff_map(approx: ChartData, exact: ChartData, amplify: float = 50.0) -> ChartData:
    """Elementwise |approx - exact| * amplify, same shape; for difference overlays."""
    if approx.kind != exact.kind or approx.shape != exact.shape:
        raise SpecMismatch("difference map needs charts of identical kind and shape")
    return ChartData(
        kind=approx.kind,
        shape=approx.shape,
        values=np.abs(approx.values - exact.values) * amplify,
        labels=approx.labels,
        axis_names=approx.axis_names,
        meta={"diff": True, "amplify": amplify},
    )
