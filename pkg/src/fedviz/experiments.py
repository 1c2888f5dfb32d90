"""Desk-scale experiment pipeline: synthesize, shard, federate, measure.

This is the algorithm-level harness behind ``fedviz sweep`` and the accuracy
trend checks. It drives the schemes as pure functions (no transport) so grid
points stay fast and exactly seeded.
"""

from __future__ import annotations

import dataclasses
import time
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .compose import ChartSpec
from .datasim import ShardPolicy, default_city, generate, shard
from .features import FeatureVector, aggregate
from .fedmodel import ModelConfig, TrainConfig, predict_all, run_federated_training
from .metrics import AccuracyReport, jsd, relative_error
from .presets import heatmap, preset_chart
from .secagg import aggregate_uploads, decode_fixed, encode_fixed, masked_upload, sample_masks


@dataclass(frozen=True)
class ExperimentBase:
    """Defaults for one experiment family; sweep axes override single fields."""

    scheme: str = "prediction"
    chart: str = "week_histogram"  # preset name, or "heatmap:RxC" for granularity points
    n_clients: int = 5
    records: int = 7000
    days: int = 7
    distribution: str = "iid"  # "iid" | "non_iid"
    alpha: float = 0.9
    affinity_key: str = "time"  # what non-iid shards are biased by: "time" | "zone"
    rounds: int = 30
    epochs: int = 1
    lr: Optional[float] = None  # None = TrainConfig default
    batch_size: Optional[int] = None


def _chart_for(name: str) -> ChartSpec:
    if name.startswith("heatmap:"):
        rows, cols = name.split(":", 1)[1].split("x")
        return heatmap(int(rows), int(cols))
    return preset_chart(name)


def client_vectors(base: ExperimentBase, chart: ChartSpec, seed: int) -> list[FeatureVector]:
    """Generate the city, shard it, and aggregate each shard over the chart's partition."""
    records = generate(default_city(count=base.records, days=base.days, seed=seed))
    policy = ShardPolicy(
        kind=base.distribution,
        alpha=base.alpha if base.distribution == "non_iid" else 0.0,
        affinity_key=base.affinity_key,
        seed=seed,
    )
    shards = shard(records, policy, base.n_clients)
    return [aggregate(s, chart.partition) for s in shards]


def secure_sum(vectors: list[FeatureVector], seed: int) -> FeatureVector:
    """The query scheme as pure functions: mask, upload, aggregate, decode."""
    n = len(vectors)
    m = len(vectors[0])
    all_masks = {
        i: sample_masks(i, [j for j in range(n) if j != i], m, rng_seed=seed + i) for i in range(n)
    }
    uploads = []
    for i, vf in enumerate(vectors):
        sent = all_masks[i]
        received = [mk for j, masks in all_masks.items() if j != i for mk in masks if mk.to == i]
        uploads.append(masked_upload(encode_fixed(vf), sent, received))
    return decode_fixed(aggregate_uploads(uploads, participants=range(n)), vectors[0].spec_id)


def accuracy_metrics(exact: FeatureVector, approx: FeatureVector) -> tuple[float, float]:
    """(RE, JSD) of an approximation; negatives are clipped to zero for the
    distribution comparison, matching how count charts render."""
    re = relative_error(exact, approx)
    clipped = FeatureVector(approx.spec_id, np.clip(approx.values, 0.0, None))
    return re, jsd(exact, clipped)


def run_point(base: ExperimentBase, axis: str, point, seed: int) -> AccuracyReport:
    """One grid point: override the axis field, run the pipeline, measure."""
    cfg = base
    if axis == "rounds":
        cfg = dataclasses.replace(base, rounds=int(point))
    elif axis == "epochs":
        cfg = dataclasses.replace(base, epochs=int(point))
    elif axis == "clients":
        cfg = dataclasses.replace(base, n_clients=int(point))
    elif axis == "granularity":
        cfg = dataclasses.replace(base, chart=f"heatmap:{point}")
    elif axis == "distribution":
        cfg = dataclasses.replace(base, distribution=str(point))
    else:
        raise ValueError(f"unknown axis {axis!r}")

    chart = _chart_for(cfg.chart)
    vectors = client_vectors(cfg, chart, seed)
    exact = vectors[0]
    for v in vectors[1:]:
        exact = exact + v

    t0 = time.monotonic()
    if cfg.scheme == "query":
        approx = secure_sum(vectors, seed)
    else:
        tkw = {"rounds": cfg.rounds, "epochs": cfg.epochs, "seed": seed}
        if cfg.lr is not None:
            tkw["lr"] = cfg.lr
        if cfg.batch_size is not None:
            tkw["batch_size"] = cfg.batch_size
        mcfg = ModelConfig(m=chart.partition.num_bins)
        params, _ = run_federated_training(vectors, mcfg, TrainConfig(**tkw))
        per_client_avg = predict_all(params, mcfg.m, spec_id=exact.spec_id)
        approx = FeatureVector(exact.spec_id, per_client_avg.values * cfg.n_clients)
    elapsed = time.monotonic() - t0

    re, j = accuracy_metrics(exact, approx)
    return AccuracyReport(
        jsd=j,
        re=re,
        n_features=len(exact),
        rounds=cfg.rounds,
        epochs=cfg.epochs,
        n_clients=cfg.n_clients,
        granularity=cfg.chart,
        distribution=cfg.distribution,
        seed=seed,
        elapsed_s=elapsed,
    )
