"""Synthetic taxi-order-like data with controllable structure, plus sharding.

Records are drawn from weighted spatial hotspots with a weekly/diurnal
intensity profile, then split across clients either uniformly (i.i.d.) or
with per-client affinities (non-i.i.d., strength alpha).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .features import DataRecord, write_csv

DAY = 86400.0
WEEK = 7 * DAY

# default synthetic city used by presets and the CLI
CITY_BBOX = (30.0, 31.0, 120.0, 121.0)  # lat_lo, lat_hi, lon_lo, lon_hi
ZONES = ("center/mall", "north/university", "south/station", "east/fair", "west/port")


@dataclass(frozen=True)
class Hotspot:
    name: str
    lat: float
    lon: float
    spread: float  # std dev in degrees
    weight: float

    def __post_init__(self) -> None:
        if self.weight <= 0:
            raise ValueError("hotspot weight must be positive")
        if self.spread < 0:
            raise ValueError("spread must be non-negative")


@dataclass(frozen=True)
class GenSpec:
    """What to synthesize: count, time span, hotspots, intensity profiles, seed."""

    count: int
    t_lo: float
    t_hi: float
    hotspots: tuple[Hotspot, ...]
    weekly: tuple[float, ...] = (1.0,) * 7  # relative intensity per weekday
    diurnal: tuple[float, ...] = (1.0,) * 24  # relative intensity per hour
    seed: int = 0

    def __post_init__(self) -> None:
        if self.count < 0:
            raise ValueError("count must be >= 0")
        if not self.t_lo < self.t_hi:
            raise ValueError("empty time span")
        if not self.hotspots:
            raise ValueError("at least one hotspot required")
        if len(self.weekly) != 7 or len(self.diurnal) != 24:
            raise ValueError("weekly profile has 7 entries, diurnal has 24")
        if min(self.weekly) < 0 or min(self.diurnal) < 0:
            raise ValueError("intensity profiles must be non-negative")


def generate(spec: GenSpec) -> list[DataRecord]:
    """Deterministic synthesis; origins cluster on hotspots per their weights."""
    # domain-separated from shard() so equal seeds cannot replay the same stream
    rng = np.random.default_rng([spec.seed, 0x6E67])
    n = spec.count
    if n == 0:
        return []
    h = len(spec.hotspots)
    weights = np.array([hs.weight for hs in spec.hotspots], dtype=np.float64)
    weights /= weights.sum()
    origin_pick = rng.choice(h, size=n, p=weights)
    dest_pick = rng.choice(h, size=n, p=weights)

    # sample start days/hours from the joint weekly x diurnal intensity
    wk = np.array(spec.weekly) / max(sum(spec.weekly), 1e-12)
    dn = np.array(spec.diurnal) / max(sum(spec.diurnal), 1e-12)
    n_days = max(int(np.ceil((spec.t_hi - spec.t_lo) / DAY)), 1)
    day_w = np.array([wk[d % 7] for d in range(n_days)], dtype=np.float64)
    day_w /= day_w.sum()
    days = rng.choice(n_days, size=n, p=day_w)
    hours = rng.choice(24, size=n, p=dn)
    t_start = spec.t_lo + days * DAY + hours * 3600.0 + rng.uniform(0, 3600.0, size=n)
    t_start = np.minimum(t_start, np.nextafter(spec.t_hi, spec.t_lo))
    duration = rng.lognormal(mean=6.0, sigma=0.5, size=n)  # ~10 min rides

    records = []
    for i in range(n):
        o = spec.hotspots[origin_pick[i]]
        d = spec.hotspots[dest_pick[i]]
        lat_o = float(np.clip(o.lat + rng.normal(0, o.spread), -90, 90))
        lon_o = float(np.clip(o.lon + rng.normal(0, o.spread), -180, 180))
        lat_d = float(np.clip(d.lat + rng.normal(0, d.spread), -90, 90))
        lon_d = float(np.clip(d.lon + rng.normal(0, d.spread), -180, 180))
        records.append(
            DataRecord(
                t_start=float(t_start[i]),
                t_end=float(t_start[i] + duration[i]),
                lat_o=lat_o,
                lon_o=lon_o,
                lat_d=lat_d,
                lon_d=lon_d,
                tags=(("zone", o.name), ("route", f"{o.name}>{d.name}")),
                rid=i,
            )
        )
    return records


@dataclass(frozen=True)
class ShardPolicy:
    """IID: seeded uniform assignment. NonIID: zone- or time-biased assignment.

    alpha in [0, 1] is the affinity strength: 0 reduces to IID, 1 is hard
    assignment of each zone (or time slice) to its preferred client.
    """

    kind: str = "iid"  # "iid" | "non_iid"
    alpha: float = 0.9
    affinity_key: str = "zone"  # "zone" | "time"
    seed: int = 0

    def __post_init__(self) -> None:
        if self.kind not in ("iid", "non_iid"):
            raise ValueError(f"unknown shard policy {self.kind!r}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must be in [0, 1]")
        if self.affinity_key not in ("zone", "time"):
            raise ValueError("affinity_key must be 'zone' or 'time'")

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "alpha": self.alpha,
            "affinity_key": self.affinity_key,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ShardPolicy":
        return cls(**d)


def shard(
    records: Sequence[DataRecord], policy: ShardPolicy, n: int
) -> list[list[DataRecord]]:
    """Partition the records exactly across n clients (union = input, disjoint)."""
    if n < 1:
        raise ValueError("need at least one shard")
    rng = np.random.default_rng([policy.seed, 0x5348])
    shards: list[list[DataRecord]] = [[] for _ in range(n)]
    if not records:
        return shards

    if policy.kind == "iid" or policy.alpha == 0.0:
        assign = rng.integers(0, n, size=len(records))
        for rec, c in zip(records, assign):
            shards[c].append(rec)
        return shards

    # non-i.i.d.: each zone (or time slice) prefers one client round-robin
    if policy.affinity_key == "zone":
        zones = sorted({rec.tag("zone") or "" for rec in records})
        owner = {z: i % n for i, z in enumerate(zones)}
        keys = [owner[rec.tag("zone") or ""] for rec in records]
    else:
        t_lo = min(rec.t_start for rec in records)
        t_hi = max(rec.t_start for rec in records) + 1.0
        width = (t_hi - t_lo) / n
        keys = [min(int((rec.t_start - t_lo) / width), n - 1) for rec in records]

    u = rng.random(len(records))
    others = rng.integers(0, n, size=len(records))
    for rec, preferred, coin, alt in zip(records, keys, u, others):
        c = preferred if coin < policy.alpha else int(alt)
        shards[c].append(rec)
    return shards


# ---------------------------------------------------------------------------
# On-disk layout: one CSV per client plus a manifest mapping client id -> path.
# ---------------------------------------------------------------------------


def write_shards(
    shards: Sequence[Sequence[DataRecord]], out_dir: str | Path, manifest_name: str = "manifest.json"
) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = {}
    for i, recs in enumerate(shards):
        fname = f"client_{i:03d}.csv"
        write_csv(recs, str(out / fname))
        entries[str(i)] = fname
    manifest = out / manifest_name
    manifest.write_text(json.dumps({"clients": entries}, indent=2, sort_keys=True))
    return manifest


def read_manifest(manifest_path: str | Path) -> dict[int, Path]:
    p = Path(manifest_path)
    d = json.loads(p.read_text())
    return {int(cid): p.parent / fname for cid, fname in d["clients"].items()}


def default_city(count: int = 20000, days: int = 28, seed: int = 0) -> GenSpec:
    """A five-hotspot city over CITY_BBOX with evening-heavy weekday traffic."""
    lat_lo, lat_hi, lon_lo, lon_hi = CITY_BBOX
    mid_lat, mid_lon = (lat_lo + lat_hi) / 2, (lon_lo + lon_hi) / 2
    span_lat, span_lon = lat_hi - lat_lo, lon_hi - lon_lo
    offsets = {
        "center/mall": (0.0, 0.0, 0.05, 3.0),
        "north/university": (0.3, -0.25, 0.04, 2.0),
        "south/station": (-0.3, 0.2, 0.03, 2.0),
        "east/fair": (0.1, 0.38, 0.05, 1.0),
        "west/port": (-0.15, -0.35, 0.06, 1.0),
    }
    hotspots = tuple(
        Hotspot(
            name=name,
            lat=mid_lat + dy * span_lat,
            lon=mid_lon + dx * span_lon,
            spread=spread,
            weight=w,
        )
        for name, (dy, dx, spread, w) in offsets.items()
    )
    diurnal = tuple(
        0.2 if h < 6 else (1.0 if h < 17 else (2.0 if h < 23 else 0.5)) for h in range(24)
    )
    return GenSpec(
        count=count,
        t_lo=0.0,
        t_hi=days * DAY,
        hotspots=hotspots,
        weekly=(1.0, 1.0, 1.0, 1.1, 1.3, 1.6, 1.4),
        diurnal=diurnal,
        seed=seed,
    )
