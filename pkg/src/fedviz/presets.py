"""Ready-made chart configurations matching the default synthetic city layout."""

from __future__ import annotations

from .compose import ChartSpec
from .datasim import CITY_BBOX, DAY, WEEK, ZONES
from .features import Category1D, Grid2D, OD4D, PartitionSpec, Time1D, TreeLeaves

WEEKDAYS = ("Mon", "Tue", "Wed", "Thu", "Fri", "Sat", "Sun")


def week_histogram() -> ChartSpec:
    return ChartSpec(
        kind="Histogram",
        partition=PartitionSpec(Time1D(bins=7, t_lo=0.0, t_hi=WEEK)),
        labels=WEEKDAYS,
        axis_names=("day", "trips"),
    )


def calendar_daily(days: int = 28) -> ChartSpec:
    return ChartSpec(
        kind="Calendar",
        partition=PartitionSpec(Time1D(bins=days, t_lo=0.0, t_hi=days * DAY)),
        axis_names=("day", "trips"),
    )


def heatmap(rows: int = 16, cols: int = 16) -> ChartSpec:
    lat_lo, lat_hi, lon_lo, lon_hi = CITY_BBOX
    return ChartSpec(
        kind="Heatmap",
        partition=PartitionSpec(
            Grid2D(rows=rows, cols=cols, lat_lo=lat_lo, lat_hi=lat_hi, lon_lo=lon_lo, lon_hi=lon_hi)
        ),
        axis_names=("lat", "lon"),
    )


def odmap(outer: int = 8, inner: int = 8) -> ChartSpec:
    lat_lo, lat_hi, lon_lo, lon_hi = CITY_BBOX
    return ChartSpec(
        kind="ODMap",
        partition=PartitionSpec(
            OD4D(
                o_rows=outer,
                o_cols=outer,
                d_rows=inner,
                d_cols=inner,
                lat_lo=lat_lo,
                lat_hi=lat_hi,
                lon_lo=lon_lo,
                lon_hi=lon_hi,
            )
        ),
        axis_names=("origin", "destination"),
    )


def treemap() -> ChartSpec:
    return ChartSpec(
        kind="Treemap",
        partition=PartitionSpec(TreeLeaves(leaves=ZONES, tag_key="zone")),
    )


def sankey() -> ChartSpec:
    routes = tuple(f"{a}>{b}" for a in ZONES for b in ZONES if a != b)
    return ChartSpec(
        kind="Sankey",
        partition=PartitionSpec(Category1D(categories=routes, tag_key="route")),
    )


PRESETS = {
    "week_histogram": week_histogram,
    "calendar_daily": calendar_daily,
    "heatmap_16x16": heatmap,
    "odmap_8x8": odmap,
    "treemap_zones": treemap,
    "sankey_routes": sankey,
}


def preset_chart(name: str) -> ChartSpec:
    if name not in PRESETS:
        raise KeyError(f"unknown chart preset {name!r}; have {sorted(PRESETS)}")
    return PRESETS[name]()


def chart_presets() -> dict:
    """JSON form of every preset plus the accuracy levels, for the UI."""
    return {
        "charts": {name: fn().to_dict() for name, fn in PRESETS.items()},
        "accuracy": ["low", "medium", "high"],
    }
