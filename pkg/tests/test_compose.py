import numpy as np
import pytest

from fedviz.compose import ChartData, ChartSpec, SpecMismatch, compose_prediction, compose_query, diff_map
from fedviz.features import (
    Category1D,
    FeatureVector,
    Grid2D,
    OD4D,
    PartitionSpec,
    Time1D,
    TreeLeaves,
    aggregate,
)

from conftest import DAY, rec


def week_chart():
    return ChartSpec(
        kind="Histogram",
        partition=PartitionSpec(Time1D(bins=7, t_lo=0.0, t_hi=7 * DAY)),
        labels=("Mon", "Tue", "Wed", "Thu", "Fri", "Sat", "Sun"),
    )


def vf(spec, values):
    return FeatureVector(spec.partition.spec_id, np.asarray(values, dtype=np.float64))


class TestChartSpec:
    def test_kind_partition_compatibility(self):
        grid = PartitionSpec(Grid2D(2, 2, 0, 1, 0, 1))
        with pytest.raises(SpecMismatch):
            ChartSpec(kind="Histogram", partition=grid)
        with pytest.raises(SpecMismatch):
            ChartSpec(kind="Treemap", partition=grid)
        ChartSpec(kind="Heatmap", partition=grid)  # fine
        with pytest.raises(ValueError):
            ChartSpec(kind="Scatter", partition=grid)

    def test_dict_round_trip(self):
        spec = week_chart()
        assert ChartSpec.from_dict(spec.to_dict()) == spec


class TestComposeQuery:
    def test_histogram_pass_through(self):
        spec = week_chart()
        chart = compose_query(vf(spec, [9, 0, 0, 0, 0, 0, 3]), spec)
        assert chart.kind == "Histogram"
        assert chart.shape == (7,)
        assert chart.values.tolist() == [9, 0, 0, 0, 0, 0, 3]
        assert chart.labels[0] == "Mon"
        assert chart.meta["exact"] is True

    def test_heatmap_reshape(self):
        spec = ChartSpec(kind="Heatmap", partition=PartitionSpec(Grid2D(2, 2, 0, 1, 0, 1)))
        chart = compose_query(vf(spec, [1, 2, 3, 4]), spec)
        assert chart.grid().tolist() == [[1, 2], [3, 4]]

    def test_odmap_nested_shape(self):
        spec = ChartSpec(kind="ODMap", partition=PartitionSpec(OD4D(2, 2, 2, 2, 0, 1, 0, 1)))
        chart = compose_query(vf(spec, list(range(16))), spec)
        assert chart.shape == (2, 2, 2, 2)
        assert chart.grid()[1, 1, 0, 0] == 12

    def test_treemap_centralized_oracle(self):
        part = PartitionSpec(TreeLeaves(leaves=("a/x", "a/y", "b/z"), tag_key="zone"))
        spec = ChartSpec(kind="Treemap", partition=part)
        shards = [
            [rec(tags=(("zone", "a/x"),)), rec(tags=(("zone", "b/z"),))],
            [rec(tags=(("zone", "a/x"),))],
            [rec(tags=(("zone", "a/y"),)), rec(tags=(("zone", "a/y"),))],
        ]
        total = aggregate([r for s in shards for r in s], part)
        summed = np.sum([aggregate(s, part).values for s in shards], axis=0)
        chart = compose_query(FeatureVector(part.spec_id, summed), spec)
        assert chart.values.tolist() == total.values.tolist() == [2, 2, 1]
        assert chart.labels == ("a/x", "a/y", "b/z")

    def test_bijective_reshape(self):
        spec = ChartSpec(kind="Heatmap", partition=PartitionSpec(Grid2D(3, 5, 0, 1, 0, 1)))
        values = np.arange(15.0)
        chart = compose_query(FeatureVector(spec.partition.spec_id, values), spec)
        assert np.array_equal(chart.flatten(), values)

    def test_length_and_spec_mismatch(self):
        spec = week_chart()
        with pytest.raises(SpecMismatch):
            compose_query(FeatureVector(spec.partition.spec_id, np.zeros(6)), spec)
        with pytest.raises(SpecMismatch):
            compose_query(FeatureVector("wrong-id", np.zeros(7)), spec)


class TestComposePrediction:
    def test_n1_equals_query(self):
        spec = week_chart()
        v = vf(spec, [1.5, 2, 3, 4, 5, 6, 7])
        a = compose_prediction(v, 1, spec)
        b = compose_query(v, spec)
        assert np.array_equal(a.values, b.values)

    def test_scaling_arithmetic(self):
        part = PartitionSpec(Category1D(categories=("only",), tag_key="k"))
        spec = ChartSpec(kind="Pie", partition=part)
        chart = compose_prediction(FeatureVector(part.spec_id, np.array([2.0])), 5, spec)
        assert chart.values.tolist() == [10.0]
        assert chart.meta == {"exact": False, "n_clients": 5}

    def test_bad_client_count(self):
        spec = week_chart()
        with pytest.raises(SpecMismatch):
            compose_prediction(vf(spec, np.zeros(7)), 0, spec)


class TestDiffMap:
    def _pair(self):
        spec = ChartSpec(kind="Heatmap", partition=PartitionSpec(Grid2D(2, 2, 0, 1, 0, 1)))
        exact = compose_query(vf(spec, [1, 2, 3, 4]), spec)
        approx = compose_query(vf(spec, [1.1, 2, 3, 3.5]), spec)
        return exact, approx

    def test_identical_inputs_zero(self):
        exact, _ = self._pair()
        assert np.all(diff_map(exact, exact, 50.0).values == 0)

    def test_amplification(self):
        exact, approx = self._pair()
        d = diff_map(approx, exact, 50.0)
        assert d.values[0] == pytest.approx(5.0)
        assert d.meta["amplify"] == 50.0

    def test_elementwise_oracle_amplify_one(self):
        rng = np.random.default_rng(4)
        spec = ChartSpec(kind="Heatmap", partition=PartitionSpec(Grid2D(3, 3, 0, 1, 0, 1)))
        a = compose_query(vf(spec, rng.uniform(0, 9, 9)), spec)
        b = compose_query(vf(spec, rng.uniform(0, 9, 9)), spec)
        d = diff_map(a, b, 1.0)
        for k in range(9):
            assert d.values[k] == abs(a.values[k] - b.values[k])

    def test_shape_mismatch(self):
        exact, _ = self._pair()
        other = compose_query(
            vf(ChartSpec(kind="Heatmap", partition=PartitionSpec(Grid2D(1, 4, 0, 1, 0, 1))), [1, 2, 3, 4]),
            ChartSpec(kind="Heatmap", partition=PartitionSpec(Grid2D(1, 4, 0, 1, 0, 1))),
        )
        with pytest.raises(SpecMismatch):
            diff_map(exact, other, 1.0)


class TestChartData:
    def test_json_round_trip_and_stability(self):
        spec = week_chart()
        chart = compose_query(vf(spec, [1, 2, 3, 4, 5, 6, 7]), spec)
        text = chart.to_json()
        again = ChartData.from_dict(__import__("json").loads(text))
        assert again.to_json() == text
        assert np.array_equal(again.values, chart.values)

    def test_finite_and_shape_validation(self):
        with pytest.raises(SpecMismatch):
            ChartData(kind="Histogram", shape=(3,), values=np.array([1.0, 2.0]))
        with pytest.raises(SpecMismatch):
            ChartData(kind="Histogram", shape=(2,), values=np.array([1.0, np.nan]))
