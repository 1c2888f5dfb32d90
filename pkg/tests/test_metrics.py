import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedviz.features import FeatureVector
from fedviz.metrics import (
    AccuracyReport,
    DegenerateExact,
    InvalidDistribution,
    SweepResult,
    jsd,
    relative_error,
    sweep,
)


def fv(values):
    return FeatureVector("m", np.asarray(values, dtype=np.float64))


class TestRelativeError:
    def test_identity_is_zero(self):
        assert relative_error(fv([1, 2, 3]), fv([1, 2, 3])) == 0.0

    def test_direct_arithmetic(self):
        assert relative_error(fv([10]), fv([9])) == pytest.approx(0.1, abs=1e-15)

    def test_zero_bin_counts_in_numerator_only(self):
        assert relative_error(fv([0, 10]), fv([1, 10])) == pytest.approx(0.1, abs=1e-15)

    def test_degenerate_exact(self):
        with pytest.raises(DegenerateExact):
            relative_error(fv([0, 0]), fv([1, 2]))

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            relative_error(fv([1]), fv([1, 2]))

    @settings(max_examples=100, deadline=None)
    @given(
        st.lists(st.floats(min_value=-100, max_value=100), min_size=2, max_size=10),
        st.lists(st.floats(min_value=-100, max_value=100), min_size=2, max_size=10),
        st.lists(st.floats(min_value=1, max_value=100), min_size=2, max_size=10),
    )
    def test_triangle_bound(self, zs, hs, ys):
        n = min(len(zs), len(hs), len(ys))
        y, z, yhat = fv(ys[:n]), fv(zs[:n]), fv(hs[:n])
        lhs = relative_error(y, yhat)
        rhs = (np.sum(np.abs(y.values - z.values)) + np.sum(np.abs(z.values - yhat.values))) / np.sum(
            np.abs(y.values)
        )
        assert lhs <= rhs + 1e-12


class TestJsd:
    def test_identical_distributions(self):
        assert jsd(fv([1, 2, 3]), fv([1, 2, 3])) == pytest.approx(0.0, abs=1e-15)

    def test_disjoint_supports_hit_the_bound(self):
        assert jsd(fv([1, 0]), fv([0, 1])) == pytest.approx(1.0, abs=1e-12)

    def test_direct_summation_oracle(self):
        # p = [1/2, 1/2], q = [3/4, 1/4], m = [5/8, 3/8]; log base 2
        p, q = [0.5, 0.5], [0.75, 0.25]
        m = [(a + b) / 2 for a, b in zip(p, q)]
        want = 0.5 * sum(a * math.log2(a / c) for a, c in zip(p, m)) + 0.5 * sum(
            b * math.log2(b / c) for b, c in zip(q, m)
        )
        assert jsd(fv([1, 1]), fv([3, 1])) == pytest.approx(want, abs=1e-12)

    def test_zero_probability_bins_contribute_zero(self):
        assert jsd(fv([1, 1, 0]), fv([1, 1, 0])) == 0.0
        assert 0.0 < jsd(fv([1, 0, 1]), fv([1, 1, 0])) <= 1.0

    def test_invalid_distributions(self):
        with pytest.raises(InvalidDistribution):
            jsd(fv([-1, 2]), fv([1, 1]))
        with pytest.raises(InvalidDistribution):
            jsd(fv([1, 1]), fv([0, 0]))

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.floats(min_value=0.0, max_value=50), min_size=2, max_size=12), st.data())
    def test_symmetry_and_bounds(self, ps, data):
        if sum(ps) == 0:
            ps[0] = 1.0
        qs = data.draw(
            st.lists(st.floats(min_value=0.0, max_value=50), min_size=len(ps), max_size=len(ps))
        )
        if sum(qs) == 0:
            qs[0] = 1.0
        a = jsd(fv(ps), fv(qs))
        b = jsd(fv(qs), fv(ps))
        assert a == pytest.approx(b, abs=1e-12)
        assert -1e-12 <= a <= 1.0 + 1e-12

    def test_scale_invariance(self):
        p, q = fv([1, 2, 3]), fv([2, 2, 2])
        for k in (0.5, 3.0, 1000.0):
            assert jsd(fv(np.array([1, 2, 3]) * k), q) == pytest.approx(jsd(p, q), abs=1e-12)


class TestAccuracyReport:
    def test_bounds_enforced(self):
        with pytest.raises(ValueError):
            AccuracyReport(jsd=1.5, re=0.1, n_features=7, rounds=1, epochs=1,
                           n_clients=4, granularity="g", distribution="iid", seed=0)
        with pytest.raises(ValueError):
            AccuracyReport(jsd=0.5, re=-0.1, n_features=7, rounds=1, epochs=1,
                           n_clients=4, granularity="g", distribution="iid", seed=0)


class TestSweep:
    @staticmethod
    def _fake_point(axis, point, seed):
        return AccuracyReport(
            jsd=0.01 * seed, re=float(point) / 100.0, n_features=7, rounds=int(point),
            epochs=1, n_clients=4, granularity="hist", distribution="iid", seed=seed,
        )

    def test_grid_times_seeds_rows(self):
        result = sweep("rounds", [5, 10], self._fake_point, seeds=(0, 1, 2))
        assert len(result.rows) == 6
        assert [r["point"] for r in result.rows] == ["5", "5", "5", "10", "10", "10"]

    def test_csv_stable_columns(self):
        result = sweep("rounds", [5], self._fake_point, seeds=(0,))
        text = result.to_csv(include_timings=False)
        header = text.splitlines()[0]
        assert header == "axis,point,seed,rounds,epochs,n_clients,granularity,distribution,n_features,jsd,re"
        with_t = result.to_csv(include_timings=True)
        assert with_t.splitlines()[0].endswith(",elapsed_s")

    def test_median_by_point(self):
        result = sweep("rounds", [10, 20], self._fake_point, seeds=(0, 1, 2))
        med = result.median_re_by_point()
        assert med == {"10": 0.1, "20": 0.2}

    def test_unknown_axis(self):
        with pytest.raises(ValueError):
            sweep("flavor", [1], self._fake_point)
