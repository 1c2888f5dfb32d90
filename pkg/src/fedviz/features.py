"""Local feature pipeline: scope filtering, uniform binning, aggregation.

Every client runs this stage on its own records. All clients configured with
the same partition produce feature vectors over one shared index space
(flat indices 0..M-1), which is what makes the downstream elementwise
federation schemes possible.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Optional, Union

import numpy as np

NUMERIC_FIELDS = ("t_start", "t_end", "lat_o", "lon_o", "lat_d", "lon_d", "duration")


@dataclass(frozen=True)
class DataRecord:
    """One raw event (e.g. a taxi order). Never leaves the client that holds it."""

    t_start: float
    t_end: float
    lat_o: float
    lon_o: float
    lat_d: float
    lon_d: float
    tags: tuple[tuple[str, str], ...] = ()
    rid: int = -1  # bookkeeping id for tests; excluded from CSV and all payloads

    def __post_init__(self) -> None:
        if self.t_start > self.t_end:
            raise ValueError(f"t_start {self.t_start} > t_end {self.t_end}")
        for name in ("lat_o", "lat_d"):
            v = getattr(self, name)
            if not -90.0 <= v <= 90.0:
                raise ValueError(f"{name}={v} outside [-90, 90]")
        for name in ("lon_o", "lon_d"):
            v = getattr(self, name)
            if not -180.0 <= v <= 180.0:
                raise ValueError(f"{name}={v} outside [-180, 180]")

    def tag(self, key: str) -> Optional[str]:
        for k, v in self.tags:
            if k == key:
                return v
        return None

    def field_value(self, name: str) -> float:
        if name == "duration":
            return self.t_end - self.t_start
        if name in NUMERIC_FIELDS:
            return float(getattr(self, name))
        raise ValueError(f"unknown numeric field {name!r}")


@dataclass(frozen=True)
class ScopeFilter:
    """Declarative record filter: time window, bounding box, tag equalities."""

    time_range: Optional[tuple[float, float]] = None  # [t_lo, t_hi)
    bbox: Optional[tuple[float, float, float, float]] = None  # lat_lo, lat_hi, lon_lo, lon_hi
    tag_predicates: tuple[tuple[str, str], ...] = ()

    def __post_init__(self) -> None:
        if self.time_range is not None and not self.time_range[0] < self.time_range[1]:
            raise ValueError("empty time_range")
        if self.bbox is not None:
            lat_lo, lat_hi, lon_lo, lon_hi = self.bbox
            if not (lat_lo < lat_hi and lon_lo < lon_hi):
                raise ValueError("empty bbox")

    def matches(self, rec: DataRecord) -> bool:
        if self.time_range is not None:
            if not self.time_range[0] <= rec.t_start < self.time_range[1]:
                return False
        if self.bbox is not None:
            lat_lo, lat_hi, lon_lo, lon_hi = self.bbox
            if not (lat_lo <= rec.lat_o < lat_hi and lon_lo <= rec.lon_o < lon_hi):
                return False
        for key, want in self.tag_predicates:
            if rec.tag(key) != want:
                return False
        return True

    def to_dict(self) -> dict:
        return {
            "time_range": list(self.time_range) if self.time_range else None,
            "bbox": list(self.bbox) if self.bbox else None,
            "tag_predicates": [list(p) for p in self.tag_predicates],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ScopeFilter":
        return cls(
            time_range=tuple(d["time_range"]) if d.get("time_range") else None,
            bbox=tuple(d["bbox"]) if d.get("bbox") else None,
            tag_predicates=tuple(tuple(p) for p in d.get("tag_predicates", ())),
        )


def apply_scope(records: Iterable[DataRecord], filt: ScopeFilter) -> list[DataRecord]:
    """Keep exactly the records satisfying all present predicates, order preserved."""
    return [r for r in records if filt.matches(r)]


# ---------------------------------------------------------------------------
# Partitions. All bins are half-open [lo, hi): a value exactly at the global
# upper edge falls outside and the record is dropped.
# ---------------------------------------------------------------------------


def _uniform_bin(x: float, lo: float, hi: float, n: int) -> Optional[int]:
    if not lo <= x < hi:
        return None
    i = int(math.floor((x - lo) / ((hi - lo) / n)))
    # floating-point noise at inner edges can push to n; clamp stays in range
    return min(i, n - 1)


@dataclass(frozen=True)
class Time1D:
    """Uniform bins over [t_lo, t_hi), keyed on t_start."""

    bins: int
    t_lo: float
    t_hi: float

    def __post_init__(self) -> None:
        if self.bins < 1:
            raise ValueError("bins must be >= 1")
        if not self.t_lo < self.t_hi:
            raise ValueError("time edges must be strictly increasing")

    @property
    def num_bins(self) -> int:
        return self.bins

    def index_of(self, rec: DataRecord) -> Optional[int]:
        return _uniform_bin(rec.t_start, self.t_lo, self.t_hi, self.bins)


@dataclass(frozen=True)
class Grid2D:
    """rows x cols grid over a lat/lon box, keyed on the origin point.

    Flat index is row-major: index = lat_row * cols + lon_col.
    """

    rows: int
    cols: int
    lat_lo: float
    lat_hi: float
    lon_lo: float
    lon_hi: float

    def __post_init__(self) -> None:
        if self.rows < 1 or self.cols < 1:
            raise ValueError("grid must be at least 1x1")
        if not (self.lat_lo < self.lat_hi and self.lon_lo < self.lon_hi):
            raise ValueError("grid edges must be strictly increasing")

    @property
    def num_bins(self) -> int:
        return self.rows * self.cols

    def cell_of(self, lat: float, lon: float) -> Optional[tuple[int, int]]:
        r = _uniform_bin(lat, self.lat_lo, self.lat_hi, self.rows)
        c = _uniform_bin(lon, self.lon_lo, self.lon_hi, self.cols)
        if r is None or c is None:
            return None
        return r, c

    def index_of(self, rec: DataRecord) -> Optional[int]:
        cell = self.cell_of(rec.lat_o, rec.lon_o)
        if cell is None:
            return None
        return cell[0] * self.cols + cell[1]


@dataclass(frozen=True)
class OD4D:
    """Origin cell x destination cell grid; row-major over (o_row, o_col, d_row, d_col)."""

    o_rows: int
    o_cols: int
    d_rows: int
    d_cols: int
    lat_lo: float
    lat_hi: float
    lon_lo: float
    lon_hi: float

    def __post_init__(self) -> None:
        if min(self.o_rows, self.o_cols, self.d_rows, self.d_cols) < 1:
            raise ValueError("all grid dimensions must be >= 1")
        if not (self.lat_lo < self.lat_hi and self.lon_lo < self.lon_hi):
            raise ValueError("grid edges must be strictly increasing")

    @property
    def num_bins(self) -> int:
        return self.o_rows * self.o_cols * self.d_rows * self.d_cols

    def index_of(self, rec: DataRecord) -> Optional[int]:
        o_r = _uniform_bin(rec.lat_o, self.lat_lo, self.lat_hi, self.o_rows)
        o_c = _uniform_bin(rec.lon_o, self.lon_lo, self.lon_hi, self.o_cols)
        d_r = _uniform_bin(rec.lat_d, self.lat_lo, self.lat_hi, self.d_rows)
        d_c = _uniform_bin(rec.lon_d, self.lon_lo, self.lon_hi, self.d_cols)
        if None in (o_r, o_c, d_r, d_c):
            return None
        return ((o_r * self.o_cols + o_c) * self.d_rows + d_r) * self.d_cols + d_c


@dataclass(frozen=True)
class TreeLeaves:
    """Shared tree structure: one bin per leaf path, matched against a record tag."""

    leaves: tuple[str, ...]
    tag_key: str = "leaf"

    def __post_init__(self) -> None:
        if not self.leaves:
            raise ValueError("leaf list must be non-empty")
        if len(set(self.leaves)) != len(self.leaves):
            raise ValueError("leaf paths must be unique")

    @property
    def num_bins(self) -> int:
        return len(self.leaves)

    def index_of(self, rec: DataRecord) -> Optional[int]:
        v = rec.tag(self.tag_key)
        if v is None:
            return None
        try:
            return self.leaves.index(v)
        except ValueError:
            return None


@dataclass(frozen=True)
class Category1D:
    """Ordered category list matched against a record tag (e.g. sankey link keys)."""

    categories: tuple[str, ...]
    tag_key: str

    def __post_init__(self) -> None:
        if not self.categories:
            raise ValueError("category list must be non-empty")
        if len(set(self.categories)) != len(self.categories):
            raise ValueError("categories must be unique")

    @property
    def num_bins(self) -> int:
        return len(self.categories)

    def index_of(self, rec: DataRecord) -> Optional[int]:
        v = rec.tag(self.tag_key)
        if v is None:
            return None
        try:
            return self.categories.index(v)
        except ValueError:
            return None


Binning = Union[Time1D, Grid2D, OD4D, TreeLeaves, Category1D]

_BINNING_KINDS = {
    "Time1D": Time1D,
    "Grid2D": Grid2D,
    "OD4D": OD4D,
    "TreeLeaves": TreeLeaves,
    "Category1D": Category1D,
}


@dataclass(frozen=True)
class PartitionSpec:
    """A binning rule plus an additive aggregate: the shared index space contract.

    ``aggregate`` is "count" or "sum:<field>". Only additive aggregates are
    supported; averages are derived downstream as sum/count pairs.
    """

    binning: Binning
    aggregate: str = "count"

    def __post_init__(self) -> None:
        if self.aggregate != "count":
            if not self.aggregate.startswith("sum:"):
                raise ValueError(f"aggregate must be 'count' or 'sum:<field>', got {self.aggregate!r}")
            fld = self.aggregate[4:]
            if fld not in NUMERIC_FIELDS:
                raise ValueError(f"unknown sum field {fld!r}")

    @property
    def num_bins(self) -> int:
        return self.binning.num_bins

    @property
    def spec_id(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def to_dict(self) -> dict:
        kind = type(self.binning).__name__
        params = {k: v for k, v in self.binning.__dict__.items()}
        if "leaves" in params:
            params["leaves"] = list(params["leaves"])
        if "categories" in params:
            params["categories"] = list(params["categories"])
        return {"kind": kind, "params": params, "aggregate": self.aggregate}

    @classmethod
    def from_dict(cls, d: dict) -> "PartitionSpec":
        kind = d["kind"]
        if kind not in _BINNING_KINDS:
            raise ValueError(f"unknown partition kind {kind!r}")
        params = dict(d["params"])
        if "leaves" in params:
            params["leaves"] = tuple(params["leaves"])
        if "categories" in params:
            params["categories"] = tuple(params["categories"])
        return cls(binning=_BINNING_KINDS[kind](**params), aggregate=d.get("aggregate", "count"))


@dataclass
class FeatureVector:
    """Dense per-bin aggregates over a partition's index space (implicit keys 0..M-1)."""

    spec_id: str
    values: np.ndarray

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 1:
            raise ValueError("feature vector must be one-dimensional")

    def __len__(self) -> int:
        return len(self.values)

    def __add__(self, other: "FeatureVector") -> "FeatureVector":
        if self.spec_id != other.spec_id or len(self) != len(other):
            raise ValueError("feature vectors come from different partitions")
        return FeatureVector(self.spec_id, self.values + other.values)


def bin_index(rec: DataRecord, spec: PartitionSpec) -> Optional[int]:
    """Flat bin index of a scoped record, or None if it falls outside the partition."""
    return spec.binning.index_of(rec)


def aggregate(records: Iterable[DataRecord], spec: PartitionSpec) -> FeatureVector:
    """Count (or field-sum) the records landing in each bin; out-of-range records drop."""
    values = np.zeros(spec.num_bins, dtype=np.float64)
    sum_field = spec.aggregate[4:] if spec.aggregate.startswith("sum:") else None
    for rec in records:
        j = spec.binning.index_of(rec)
        if j is None:
            continue
        values[j] += 1.0 if sum_field is None else rec.field_value(sum_field)
    return FeatureVector(spec.spec_id, values)


# ---------------------------------------------------------------------------
# CSV ingestion. Header row, columns t_start,t_end,lat_o,lon_o,lat_d,lon_d,tags
# with tags as semicolon-joined key=value. Malformed rows are skipped, counted.
# ---------------------------------------------------------------------------

CSV_COLUMNS = ["t_start", "t_end", "lat_o", "lon_o", "lat_d", "lon_d", "tags"]


def _format_tags(tags: tuple[tuple[str, str], ...]) -> str:
    return ";".join(f"{k}={v}" for k, v in tags)


def _parse_tags(s: str) -> tuple[tuple[str, str], ...]:
    if not s:
        return ()
    out = []
    for part in s.split(";"):
        k, sep, v = part.partition("=")
        if not sep or not k:
            raise ValueError(f"malformed tag {part!r}")
        out.append((k, v))
    return tuple(out)


def write_csv(records: Iterable[DataRecord], path: str) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(CSV_COLUMNS)
        for r in records:
            w.writerow(
                [
                    repr(r.t_start),
                    repr(r.t_end),
                    repr(r.lat_o),
                    repr(r.lon_o),
                    repr(r.lat_d),
                    repr(r.lon_d),
                    _format_tags(r.tags),
                ]
            )


def read_csv(path: str) -> tuple[list[DataRecord], int]:
    """Load records from CSV. Returns (records, number of malformed rows skipped)."""
    records: list[DataRecord] = []
    skipped = 0
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header != CSV_COLUMNS:
            raise ValueError(f"bad CSV header in {path}: {header}")
        for i, row in enumerate(reader):
            try:
                if len(row) != len(CSV_COLUMNS):
                    raise ValueError("wrong column count")
                records.append(
                    DataRecord(
                        t_start=float(row[0]),
                        t_end=float(row[1]),
                        lat_o=float(row[2]),
                        lon_o=float(row[3]),
                        lat_d=float(row[4]),
                        lon_d=float(row[5]),
                        tags=_parse_tags(row[6]),
                        rid=i,
                    )
                )
            except ValueError:
                skipped += 1
    return records, skipped
