import logging
import time

import numpy as np
import pytest

from fedviz import transport as tp
from fedviz.coordinator import (
    Coordinator,
    QueryRequest,
    ServiceConfig,
    SessionAborted,
    TooFewClients,
    UnknownSession,
)
from fedviz.datasim import ShardPolicy, default_city, generate, shard
from fedviz.features import FeatureVector, ScopeFilter, aggregate, apply_scope
from fedviz.metrics import relative_error
from fedviz.presets import heatmap, week_histogram
from fedviz.sim import LocalFleet


@pytest.fixture(scope="module")
def city_shards():
    records = generate(default_city(count=2000, days=7, seed=1))
    return records, shard(records, ShardPolicy(kind="iid", seed=1), 4)


@pytest.fixture()
def fleet(city_shards, tmp_path):
    _, shards = city_shards
    f = LocalFleet(shards, ServiceConfig(cache_dir=str(tmp_path / "cache")))
    f.start()
    yield f
    f.stop()


def query_request(scheme="query", **kw):
    return QueryRequest(chart=week_histogram(), scope=ScopeFilter(), scheme=scheme, **kw)


class TestQueryScheme:
    def test_exact_centralized_counts(self, city_shards, fleet):
        records, _ = city_shards
        result = fleet.coordinator.handle_query(query_request())
        exact = aggregate(records, week_histogram().partition)
        assert result.exact is True
        assert result.scheme == "query"
        assert np.array_equal(result.chart.values, exact.values)

    def test_scoped_query(self, city_shards, fleet):
        records, _ = city_shards
        scope = ScopeFilter(time_range=(0.0, 2 * 86400.0))
        result = fleet.coordinator.handle_query(
            QueryRequest(chart=week_histogram(), scope=scope, scheme="query")
        )
        exact = aggregate(apply_scope(records, scope), week_histogram().partition)
        assert np.array_equal(result.chart.values, exact.values)

    def test_deterministic_chart_bytes(self, city_shards, tmp_path):
        _, shards = city_shards
        blobs = []
        for run in range(2):
            f = LocalFleet(shards, ServiceConfig(cache_dir=str(tmp_path / f"c{run}")))
            f.start()
            try:
                blobs.append(f.coordinator.handle_query(query_request()).chart.to_json())
            finally:
                f.stop()
        assert blobs[0] == blobs[1]

    def test_timings_present(self, fleet):
        result = fleet.coordinator.handle_query(query_request())
        assert "total" in result.timings
        assert "t_mask_gen_max" in result.timings


class TestPredictionScheme:
    def test_accuracy_against_oracle(self, city_shards, fleet):
        records, _ = city_shards
        result = fleet.coordinator.handle_query(
            query_request(scheme="prediction", preset="high", seed=0)
        )
        assert result.exact is False
        exact = aggregate(records, week_histogram().partition)
        re = relative_error(exact, FeatureVector(exact.spec_id, result.chart.values))
        assert re < 0.05

    def test_round_reports_stream_in_order(self, fleet):
        result = fleet.coordinator.handle_query(
            query_request(scheme="prediction", seed=3, train_overrides={"rounds": 10, "tol": 0.0})
        )
        assert len(result.reports) == 10
        assert [r.round for r in result.reports] == list(range(1, 11))
        for r in result.reports:
            assert r.global_loss == pytest.approx(np.mean(list(r.client_losses.values())))
            assert len(r.client_losses) == 4

    def test_cache_hit_returns_equal_chart(self, fleet):
        req = query_request(scheme="prediction", seed=5, train_overrides={"rounds": 5, "tol": 0.0})
        first = fleet.coordinator.handle_query(req)
        second = fleet.coordinator.handle_query(query_request(
            scheme="prediction", seed=5, train_overrides={"rounds": 5, "tol": 0.0}
        ))
        assert first.cached is False
        assert second.cached is True
        assert second.chart.to_json() == first.chart.to_json()
        assert [r.round for r in second.reports] == [r.round for r in first.reports]


class TestGates:
    def test_too_few_clients(self, city_shards, tmp_path):
        _, shards = city_shards
        f = LocalFleet(shards[:3], ServiceConfig(cache_dir=str(tmp_path / "c3")))
        f.start()
        try:
            with pytest.raises(TooFewClients):
                f.coordinator.handle_query(query_request())
        finally:
            f.stop()

    def test_unknown_session_progress(self, fleet):
        with pytest.raises(UnknownSession):
            fleet.coordinator.subscribe("ab" * 16)

    def test_client_disconnect_aborts_session(self, city_shards, tmp_path):
        _, shards = city_shards
        f = LocalFleet(shards, ServiceConfig(cache_dir=str(tmp_path / "cd"), session_timeout=15))
        f.start()
        try:
            f.nodes[2].stop()  # dies before the query starts
            time.sleep(0.1)
            with pytest.raises((SessionAborted, TooFewClients)):
                f.coordinator.handle_query(query_request())
        finally:
            f.stop()

    def test_roster_reflects_connections(self, city_shards, tmp_path):
        _, shards = city_shards
        f = LocalFleet(shards, ServiceConfig(cache_dir=str(tmp_path / "ros")))
        assert f.coordinator.list_clients() == []
        f.start()
        try:
            roster = f.coordinator.list_clients()
            assert [c["id"] for c in roster] == [0, 1, 2, 3]
            assert all(c["connected"] for c in roster)
            assert [c["records"] for c in roster] == [len(s) for s in f.nodes and [n.records for n in f.nodes]]
            f.nodes[1].stop()
            deadline = time.monotonic() + 5
            while time.monotonic() < deadline:
                roster = f.coordinator.list_clients()
                if not roster[1]["connected"]:
                    break
                time.sleep(0.01)
            assert not roster[1]["connected"]
        finally:
            f.stop()


class TestProtocolViolations:
    def test_upload_before_mask_exchange_aborts(self, fleet):
        coordinator = fleet.coordinator
        # start a real session, then inject a premature upload for a client
        import threading

        from fedviz.secagg import RingVector

        req = query_request(session_id="cc" * 16)
        errors = []

        def run():
            try:
                coordinator.handle_query(req)
            except SessionAborted as e:
                errors.append(e)

        t = threading.Thread(target=run)
        session_id = bytes.fromhex(req.session_id)
        # pre-register a fake early upload as soon as the session appears
        t.start()
        deadline = time.monotonic() + 5
        while session_id not in coordinator.sessions and time.monotonic() < deadline:
            time.sleep(0.001)
        sess = coordinator.sessions[session_id]
        rv = RingVector(np.zeros(7, dtype=np.uint64))
        bad = tp.Envelope(
            tp.MASKED_UPLOAD, session_id, 0, tp.COORDINATOR_ID, tp.header_and_ring({}, rv)
        )
        # the state machine only rejects if masks are incomplete; force that state
        with sess.lock:
            premature = not sess.agg._masks_complete(0) and 0 not in sess.agg.uploads
            if premature:
                try:
                    coordinator.handle_envelope(None, bad)
                except Exception as e:
                    coordinator._abort_session(session_id, str(e))
        t.join(timeout=30)
        if premature:
            assert errors, "premature upload should abort the session"

    def test_duplicate_messages_dropped(self, city_shards, fleet, caplog):
        records, _ = city_shards
        # wrap one client endpoint so its masked upload is sent twice
        node = fleet.nodes[0]
        original_send = node.ep.send

        def doubled(env):
            original_send(env)
            if env.msg_type == tp.MASKED_UPLOAD:
                original_send(env)

        node.ep.send = doubled
        try:
            with caplog.at_level(logging.INFO, logger="fedviz.coordinator"):
                result = fleet.coordinator.handle_query(query_request())
            exact = aggregate(records, week_histogram().partition)
            assert np.array_equal(result.chart.values, exact.values)
        finally:
            node.ep.send = original_send


SENTINEL_LAT = 37.123456
SENTINEL_LON = -122.654321
SENTINEL_T = 1234567.891


class TestPrivacyPlumbing:
    def test_no_record_fields_reach_coordinator(self, tmp_path, caplog):
        # distinctive values that would be recognizable in any log or payload
        from fedviz.features import DataRecord

        marked = DataRecord(
            t_start=SENTINEL_T,
            t_end=SENTINEL_T + 60,
            lat_o=SENTINEL_LAT,
            lon_o=SENTINEL_LON,
            lat_d=SENTINEL_LAT,
            lon_d=SENTINEL_LON,
        )
        shards = [[marked] for _ in range(4)]
        coordinator_bound = []

        f = LocalFleet(shards, ServiceConfig(cache_dir=str(tmp_path / "priv")))
        # tap every client->coordinator channel
        for node in f.nodes:
            original_send = node.ep.send

            def tapped(env, _orig=original_send):
                coordinator_bound.append(env)
                _orig(env)

            node.ep.send = tapped
        f.start()
        chart = ChartSpecFactory()
        with caplog.at_level(logging.DEBUG):
            result = f.coordinator.handle_query(
                QueryRequest(chart=chart, scope=ScopeFilter(), scheme="query")
            )
        f.stop()

        needles = [
            str(SENTINEL_LAT).encode(),
            str(SENTINEL_LON).encode(),
            str(SENTINEL_T).encode(),
            np.float64(SENTINEL_LAT).tobytes(),
            np.float64(SENTINEL_LON).tobytes(),
            np.float64(SENTINEL_T).tobytes(),
        ]
        for env in coordinator_bound:
            blob = tp.frame(env)
            for needle in needles:
                assert needle not in blob, f"raw record bytes leaked in {env.type_name}"
        log_text = caplog.text.encode()
        for needle in needles[:3]:
            assert needle not in log_text, "raw record value appeared in logs"
        # the query itself still works: the sum counts 4 sentinel records
        assert result.chart.values.sum() == 4

    def test_message_set_carries_no_record_type(self):
        # the closed message set has no tag for raw records at all
        names = set(tp.MESSAGE_TYPES.values())
        assert names == {
            "Hello",
            "SessionStart",
            "MaskExchange",
            "MaskedUpload",
            "ParamsBroadcast",
            "ParamsUpload",
            "RoundReport",
            "ChartRequest",
            "Abort",
        }


def ChartSpecFactory():
    from fedviz.compose import ChartSpec
    from fedviz.features import Grid2D, PartitionSpec

    return ChartSpec(
        kind="Heatmap",
        partition=PartitionSpec(
            Grid2D(rows=2, cols=2, lat_lo=37.0, lat_hi=38.0, lon_lo=-123.0, lon_hi=-122.0)
        ),
    )


class TestTrainingProgress:
    def test_iterator_yields_every_round(self, fleet):
        import threading

        req = query_request(
            scheme="prediction", seed=11, session_id="dd" * 16,
            train_overrides={"rounds": 6, "tol": 0.0},
        )
        results = {}

        def run():
            results["result"] = fleet.coordinator.handle_query(req)

        t = threading.Thread(target=run)
        t.start()
        deadline = time.monotonic() + 5
        while time.monotonic() < deadline:
            try:
                fleet.coordinator.subscribe(req.session_id)
                break
            except UnknownSession:
                time.sleep(0.005)
        reports = list(fleet.coordinator.training_progress(req.session_id, timeout=30))
        t.join(timeout=30)
        assert len(reports) == 6
        assert [r.round for r in reports] == [1, 2, 3, 4, 5, 6]
