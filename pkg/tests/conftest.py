import numpy as np
import pytest

from fedviz.features import DataRecord, Grid2D, PartitionSpec, Time1D

DAY = 86400.0


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    """One verdict line per acceptance criterion, independent of output capture."""
    import sys

    results = getattr(sys.modules.get("test_acceptance"), "RESULTS", None)
    if not results:
        return
    terminalreporter.write_sep("-", "acceptance criteria")
    for name, ok, detail in results:
        suffix = f"  ({detail})" if detail else ""
        terminalreporter.write_line(f"ACCEPTANCE {name}: {'PASS' if ok else 'FAIL'}{suffix}")


def rec(t=0.0, lat_o=30.5, lon_o=120.5, lat_d=30.6, lon_d=120.6, dur=600.0, tags=()):
    return DataRecord(
        t_start=t, t_end=t + dur, lat_o=lat_o, lon_o=lon_o, lat_d=lat_d, lon_d=lon_d, tags=tags
    )


def random_records(rng: np.random.Generator, n: int, span_days: float = 7.0):
    out = []
    for _ in range(n):
        t = float(rng.uniform(0, span_days * DAY))
        out.append(
            rec(
                t=t,
                lat_o=float(rng.uniform(30.0, 31.0)),
                lon_o=float(rng.uniform(120.0, 121.0)),
                lat_d=float(rng.uniform(30.0, 31.0)),
                lon_d=float(rng.uniform(120.0, 121.0)),
            )
        )
    return out


@pytest.fixture
def week_partition():
    return PartitionSpec(Time1D(bins=7, t_lo=0.0, t_hi=7 * DAY))


@pytest.fixture
def grid_partition():
    return PartitionSpec(Grid2D(rows=4, cols=4, lat_lo=30.0, lat_hi=31.0, lon_lo=120.0, lon_hi=121.0))
