"""Coordinator: client roster, session orchestration, query handling, model cache.

The coordinator talks to clients only through the closed message set; no
message type carries raw records, and nothing here logs payload contents.
It sees masked uploads (uniformly random in isolation), model parameters
only as masked sums, declared record counts, and per-round loss scalars.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import os
import queue
import socket
import threading
import time
import uuid
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import transport as tp
from .compose import ChartData, ChartSpec, compose_prediction, compose_query
from .features import FeatureVector, ScopeFilter
from .fedmodel import (
    ModelConfig,
    ModelParams,
    RoundReport,
    TrainConfig,
    init_global,
    predict_all,
)
from .secagg import (
    MIN_CLIENTS,
    AggSession,
    MaskedUpload,
    ProtocolStateError,
    RingVector,
    aggregate_uploads,
    decode_fixed,
    PARAM_SCALE,
)

log = logging.getLogger("fedviz.coordinator")

ACCURACY_PRESETS = {"low": 10, "medium": 30, "high": 100}


class TooFewClients(RuntimeError):
    """Live sessions need more than 3 connected clients."""


class SessionAborted(RuntimeError):
    pass


class UnknownSession(KeyError):
    pass


@dataclass
class ServiceConfig:
    host: str = "127.0.0.1"
    port: int = 0  # 0 = ephemeral
    http_port: int = 0
    expected_clients: int = 4
    cache_dir: str = ".fedviz-cache"
    session_timeout: float = 300.0
    manifest: Optional[str] = None
    ready_file: Optional[str] = None

    @classmethod
    def from_file(cls, path: str | Path) -> "ServiceConfig":
        cfg = cls(**json.loads(Path(path).read_text()))
        return cfg.with_env_overrides()

    def with_env_overrides(self) -> "ServiceConfig":
        d = dataclasses.asdict(self)
        for key, cast in (
            ("host", str),
            ("port", int),
            ("http_port", int),
            ("expected_clients", int),
            ("cache_dir", str),
            ("session_timeout", float),
        ):
            env = os.environ.get(f"FEDVIZ_{key.upper()}")
            if env is not None:
                d[key] = cast(env)
        return ServiceConfig(**d)


@dataclass(frozen=True)
class QueryRequest:
    """One visualization query: what to draw, over which scope, by which scheme."""

    chart: ChartSpec
    scope: ScopeFilter
    scheme: str = "query"  # "query" (exact) | "prediction" (approximate)
    preset: str = "medium"  # accuracy preset for the prediction scheme
    seed: int = 0
    session_id: Optional[str] = None  # hex uuid; assigned when absent
    train_overrides: dict = field(default_factory=dict)
    model_overrides: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.scheme not in ("query", "prediction"):
            raise ValueError(f"unknown scheme {self.scheme!r}")
        if self.scheme == "prediction" and self.preset not in ACCURACY_PRESETS:
            raise ValueError(f"unknown accuracy preset {self.preset!r}")

    def train_config(self) -> TrainConfig:
        base = TrainConfig(rounds=ACCURACY_PRESETS[self.preset], seed=self.seed)
        return dataclasses.replace(base, **self.train_overrides)

    def model_config(self) -> ModelConfig:
        kwargs = {"m": self.chart.partition.num_bins}
        kwargs.update(self.model_overrides)
        if "hidden_dims" in kwargs:
            kwargs["hidden_dims"] = tuple(kwargs["hidden_dims"])
        return ModelConfig(**kwargs)

    def to_dict(self) -> dict:
        return {
            "chart": self.chart.to_dict(),
            "scope": self.scope.to_dict(),
            "scheme": self.scheme,
            "preset": self.preset,
            "seed": self.seed,
            "session_id": self.session_id,
            "train_overrides": self.train_overrides,
            "model_overrides": self.model_overrides,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "QueryRequest":
        return cls(
            chart=ChartSpec.from_dict(d["chart"]),
            scope=ScopeFilter.from_dict(d.get("scope") or {}),
            scheme=d.get("scheme", "query"),
            preset=d.get("preset", "medium"),
            seed=int(d.get("seed", 0)),
            session_id=d.get("session_id"),
            train_overrides=d.get("train_overrides", {}),
            model_overrides=d.get("model_overrides", {}),
        )


@dataclass
class QueryResult:
    chart: ChartData
    scheme: str
    exact: bool
    session_id: str
    n_clients: int
    reports: list[RoundReport] = field(default_factory=list)
    timings: dict = field(default_factory=dict)
    cached: bool = False

    def to_dict(self) -> dict:
        return {
            "chart": self.chart.to_dict(),
            "scheme": self.scheme,
            "exact": self.exact,
            "session_id": self.session_id,
            "n_clients": self.n_clients,
            "reports": [r.to_dict() for r in self.reports],
            "timings": self.timings,
            "cached": self.cached,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "QueryResult":
        return cls(
            chart=ChartData.from_dict(d["chart"]),
            scheme=d["scheme"],
            exact=d["exact"],
            session_id=d["session_id"],
            n_clients=d["n_clients"],
            reports=[RoundReport.from_dict(r) for r in d.get("reports", [])],
            timings=d.get("timings", {}),
            cached=d.get("cached", False),
        )


@dataclass
class ClientHandle:
    client_id: int
    endpoint: object
    records: int = 0
    pubkey: bytes = b""
    connected: bool = False


class _Session:
    """Shared session plumbing: roster, serialization lock, result delivery, progress."""

    def __init__(self, session_id: bytes, request: QueryRequest, participants: tuple[int, ...]):
        self.id = session_id
        self.request = request
        self.participants = participants
        self.lock = threading.RLock()
        self.done = threading.Event()
        self.result: Optional[QueryResult] = None
        self.error: Optional[str] = None
        self.reports: list[RoundReport] = []
        self.subscribers: list[queue.Queue] = []
        self.seen: set = set()  # (sender, recipient, type, round) dedupe keys
        self.timings: dict = {}
        self.client_timings: dict = {}
        self.t_start = time.monotonic()

    def duplicate(self, sender: int, recipient: int, msg_type: int, round_no: int) -> bool:
        key = (sender, recipient, msg_type, round_no)
        if key in self.seen:
            return True
        self.seen.add(key)
        return False

    def push_report(self, report: RoundReport) -> None:
        self.reports.append(report)
        for q in self.subscribers:
            q.put(("report", report.to_dict()))

    def finish(self, result: QueryResult) -> None:
        with self.lock:
            if self.done.is_set():
                return
            self.result = result
            for q in self.subscribers:
                q.put(("result", result.to_dict()))
            self.done.set()

    def fail(self, reason: str) -> None:
        with self.lock:
            if self.done.is_set():
                return
            self.error = reason
            for q in self.subscribers:
                q.put(("error", {"reason": reason}))
            self.done.set()

    def merge_client_timings(self, client: int, header: dict) -> None:
        for k, v in header.items():
            if k.startswith("t_"):
                self.client_timings.setdefault(k, {})[client] = v


class _QuerySession(_Session):
    def __init__(self, session_id, request, participants, agg: AggSession):
        super().__init__(session_id, request, participants)
        self.agg = agg


class _PredictionSession(_Session):
    def __init__(self, session_id, request, participants, mcfg: ModelConfig, tcfg: TrainConfig):
        super().__init__(session_id, request, participants)
        self.mcfg = mcfg
        self.tcfg = tcfg
        self.round = 0  # round 0 aggregates the scale votes, training starts at 1
        self.params = init_global(mcfg, tcfg.seed)
        self.exchanged: dict[int, set] = {}
        self.uploads: dict[int, dict[int, tuple[RingVector, float]]] = {}
        self.prev_loss: Optional[float] = None

    def masks_complete(self, client: int, round_no: int) -> bool:
        ex = self.exchanged.get(round_no, set())
        others = [p for p in self.participants if p != client]
        return all((client, o) in ex and (o, client) in ex for o in others)


class Coordinator:
    """The server side: roster, sessions, both schemes, HTTP-facing query API."""

    def __init__(self, config: Optional[ServiceConfig] = None):
        self.config = config or ServiceConfig()
        self.clients: dict[int, ClientHandle] = {}
        self.sessions: dict[bytes, _Session] = {}
        self._lock = threading.RLock()
        self._listener: Optional[socket.socket] = None
        self._threads: list[threading.Thread] = []
        self._stopping = threading.Event()
        Path(self.config.cache_dir).mkdir(parents=True, exist_ok=True)

    # -- connections ---------------------------------------------------------

    def attach(self, endpoint) -> None:
        """Adopt a client connection; a pump thread dispatches its envelopes."""
        t = threading.Thread(target=self._pump, args=(endpoint,), daemon=True)
        t.start()
        self._threads.append(t)

    def listen(self) -> int:
        """Start the TCP listener; returns the bound port."""
        s = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        s.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        s.bind((self.config.host, self.config.port))
        s.listen(64)
        self._listener = s
        t = threading.Thread(target=self._accept_loop, daemon=True)
        t.start()
        self._threads.append(t)
        return s.getsockname()[1]

    def _accept_loop(self) -> None:
        assert self._listener is not None
        while not self._stopping.is_set():
            try:
                conn, _ = self._listener.accept()
            except OSError:
                return
            conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            self.attach(tp.SocketEndpoint(conn))

    def stop(self) -> None:
        self._stopping.set()
        if self._listener is not None:
            try:
                self._listener.close()
            except OSError:
                pass
        with self._lock:
            handles = list(self.clients.values())
        for h in handles:
            try:
                h.endpoint.close()
            except Exception:
                pass

    def _pump(self, endpoint) -> None:
        client_id: Optional[int] = None
        while not self._stopping.is_set():
            try:
                env = endpoint.recv(timeout=0.2)
            except (tp.ChannelClosed, tp.FrameError) as e:
                if client_id is not None:
                    self._mark_disconnected(client_id, str(e))
                return
            if env is None:
                continue
            if env.msg_type == tp.HELLO:
                client_id = env.sender
            try:
                self.handle_envelope(endpoint, env)
            except Exception as e:  # protocol violation: abort that session
                log.warning("aborting session after %s from client %d: %s", env.type_name, env.sender, e)
                self._abort_session(env.session, f"{env.type_name} from {env.sender}: {e}")

    def _mark_disconnected(self, client_id: int, reason: str) -> None:
        with self._lock:
            handle = self.clients.get(client_id)
            if handle is not None:
                handle.connected = False
            affected = [
                s for s in self.sessions.values() if client_id in s.participants and not s.done.is_set()
            ]
        for s in affected:
            self._abort_session(s.id, f"client {client_id} disconnected: {reason}")

    # -- envelope handling -----------------------------------------------------

    def handle_envelope(self, endpoint, env: tp.Envelope) -> None:
        if env.msg_type == tp.HELLO:
            self._on_hello(endpoint, env)
        elif env.msg_type == tp.MASK_EXCHANGE:
            self._on_mask_exchange(env)
        elif env.msg_type == tp.MASKED_UPLOAD:
            self._on_masked_upload(env)
        elif env.msg_type == tp.PARAMS_UPLOAD:
            self._on_params_upload(env)
        elif env.msg_type == tp.ABORT:
            reason = tp.parse_json(env.payload).get("reason", "client abort")
            self._abort_session(env.session, f"client {env.sender}: {reason}")
        else:
            raise ProtocolStateError(f"unexpected {env.type_name} at coordinator")

    def _on_hello(self, endpoint, env: tp.Envelope) -> None:
        d = tp.parse_json(env.payload)
        with self._lock:
            self.clients[env.sender] = ClientHandle(
                client_id=env.sender,
                endpoint=endpoint,
                records=int(d.get("records", 0)),
                pubkey=bytes.fromhex(d.get("pubkey", "")),
                connected=True,
            )
        log.info("client %d connected (declares %s records)", env.sender, d.get("records"))
        endpoint.send(
            tp.Envelope(tp.HELLO, tp.NO_SESSION, tp.COORDINATOR_ID, env.sender, tp.json_payload({"ok": True}))
        )

    def _session_for(self, session_id: bytes) -> _Session:
        with self._lock:
            sess = self.sessions.get(session_id)
        if sess is None:
            raise UnknownSession(session_id.hex())
        return sess

    def _on_mask_exchange(self, env: tp.Envelope) -> None:
        sess = self._session_for(env.session)
        round_no, _ = tp.parse_mask_exchange(env.payload)
        with sess.lock:
            if sess.done.is_set():
                return
            if env.sender not in sess.participants or env.recipient not in sess.participants:
                raise tp.UnknownPeer(f"mask relay {env.sender}->{env.recipient} outside roster")
            if sess.duplicate(env.sender, env.recipient, env.msg_type, round_no):
                log.info("dropping duplicate mask relay %d->%d", env.sender, env.recipient)
                return
            if isinstance(sess, _QuerySession):
                sess.agg.record_mask_exchange(env.sender, env.recipient)
            else:
                sess.exchanged.setdefault(round_no, set()).add((env.sender, env.recipient))
            if "mask_exchange_start" not in sess.timings:
                sess.timings["mask_exchange_start"] = time.monotonic() - sess.t_start
        # relay without inspection; payload stays sealed for the pair
        with self._lock:
            handle = self.clients.get(env.recipient)
        if handle is None or not handle.connected:
            raise tp.UnknownPeer(f"recipient {env.recipient} not connected")
        handle.endpoint.send(env)

    def _on_masked_upload(self, env: tp.Envelope) -> None:
        sess = self._session_for(env.session)
        if not isinstance(sess, _QuerySession):
            raise ProtocolStateError("masked feature upload in a prediction session")
        header, rv = tp.parse_header_and_ring(env.payload, scale=sess.agg.scale)
        with sess.lock:
            if sess.done.is_set():
                return
            if sess.duplicate(env.sender, tp.COORDINATOR_ID, env.msg_type, 0):
                return
            sess.merge_client_timings(env.sender, header)
            sess.agg.record_upload(MaskedUpload(env.sender, rv, env.session.hex()))
            if not sess.agg.complete:
                return
            t0 = time.monotonic()
            total = sess.agg.aggregate()
            decoded = decode_fixed(total, spec_id=sess.request.chart.partition.spec_id)
            chart = compose_query(decoded, sess.request.chart)
            sess.timings["decode_compose"] = time.monotonic() - t0
            sess.timings["total"] = time.monotonic() - sess.t_start
            self._fold_client_timings(sess)
            sess.finish(
                QueryResult(
                    chart=chart,
                    scheme="query",
                    exact=True,
                    session_id=env.session.hex(),
                    n_clients=len(sess.participants),
                    timings=sess.timings,
                )
            )

    def _on_params_upload(self, env: tp.Envelope) -> None:
        sess = self._session_for(env.session)
        if not isinstance(sess, _PredictionSession):
            raise ProtocolStateError("parameter upload in a query session")
        header, rv = tp.parse_header_and_ring(env.payload, scale=PARAM_SCALE)
        round_no = int(header.get("round", -1))
        with sess.lock:
            if sess.done.is_set():
                return
            if env.sender not in sess.participants:
                raise ProtocolStateError(f"upload from unknown client {env.sender}")
            if sess.duplicate(env.sender, tp.COORDINATOR_ID, env.msg_type, round_no):
                return
            if round_no != sess.round:
                raise ProtocolStateError(f"upload for round {round_no}, session at {sess.round}")
            if not sess.masks_complete(env.sender, round_no):
                raise ProtocolStateError(
                    f"upload from client {env.sender} before round {round_no} mask exchange completed"
                )
            sess.merge_client_timings(env.sender, header)
            sess.uploads.setdefault(round_no, {})[env.sender] = (rv, float(header["loss"]))
            if len(sess.uploads[round_no]) < len(sess.participants):
                return
            self._finish_round(sess)

    def _finish_round(self, sess: _PredictionSession) -> None:
        n = len(sess.participants)
        round_no = sess.round
        ups = sess.uploads.pop(round_no)
        total = aggregate_uploads(
            [MaskedUpload(c, rv, sess.id.hex()) for c, (rv, _) in sorted(ups.items())],
            participants=sess.participants,
        )
        if round_no == 0:
            # scale consensus done: only the mean vote is ever visible here
            sess.params.label_scale = float(decode_fixed(total).values[0]) / n
            sess.round = 1
            self._broadcast_params(sess)
            return
        # the decoded sum of flattened parameter vectors, averaged into P(t)
        flat = decode_fixed(total).values / n
        sess.params = ModelParams.from_flat(sess.mcfg, flat, version=round_no)
        losses = {c: loss for c, (_, loss) in ups.items()}
        global_loss = float(np.mean(list(losses.values())))
        sess.push_report(RoundReport(round_no, losses, global_loss))
        converged = sess.prev_loss is not None and abs(global_loss - sess.prev_loss) < sess.tcfg.tol
        sess.prev_loss = global_loss
        if round_no >= sess.tcfg.rounds or converged:
            t0 = time.monotonic()
            vf = predict_all(sess.params, sess.mcfg.m, spec_id=sess.request.chart.partition.spec_id)
            chart = compose_prediction(vf, n, sess.request.chart)
            sess.timings["predict_compose"] = time.monotonic() - t0
            sess.timings["total"] = time.monotonic() - sess.t_start
            self._fold_client_timings(sess)
            self._cache_store(sess)
            sess.finish(
                QueryResult(
                    chart=chart,
                    scheme="prediction",
                    exact=False,
                    session_id=sess.id.hex(),
                    n_clients=n,
                    reports=list(sess.reports),
                    timings=sess.timings,
                )
            )
            return
        sess.round += 1
        self._broadcast_params(sess)

    def _broadcast_params(self, sess: _PredictionSession) -> None:
        blob = sess.params.to_bytes(dtype="<f8")
        payload = tp.header_and_blob({"round": sess.round}, blob)
        for p in sess.participants:
            self._send_to(p, tp.PARAMS_BROADCAST, sess.id, payload)
        if sess.reports:
            report_payload = tp.json_payload(sess.reports[-1].to_dict())
            for p in sess.participants:
                self._send_to(p, tp.ROUND_REPORT, sess.id, report_payload)

    def _fold_client_timings(self, sess: _Session) -> None:
        # mirror the measured parts: mask generation / exchange / encode+decode
        for k, per_client in sess.client_timings.items():
            sess.timings[k + "_max"] = max(per_client.values())

    def _send_to(self, client_id: int, msg_type: int, session: bytes, payload: bytes) -> None:
        with self._lock:
            handle = self.clients.get(client_id)
        if handle is None or not handle.connected:
            raise ProtocolStateError(f"client {client_id} not connected")
        handle.endpoint.send(tp.Envelope(msg_type, session, tp.COORDINATOR_ID, client_id, payload))

    def _abort_session(self, session_id: bytes, reason: str) -> None:
        if session_id == tp.NO_SESSION:
            return
        with self._lock:
            sess = self.sessions.get(session_id)
        if sess is None or sess.done.is_set():
            return
        log.warning("session %s aborted: %s", session_id.hex()[:8], reason)
        payload = tp.json_payload({"reason": reason})
        for p in sess.participants:
            try:
                self._send_to(p, tp.ABORT, session_id, payload)
            except ProtocolStateError:
                pass
        sess.fail(reason)

    # -- queries ---------------------------------------------------------------

    def list_clients(self) -> list[dict]:
        with self._lock:
            return [
                {"id": h.client_id, "connected": h.connected, "records": h.records}
                for h in sorted(self.clients.values(), key=lambda h: h.client_id)
            ]

    def handle_query(self, request: QueryRequest) -> QueryResult:
        """Run one query end to end; blocks until the composed chart is ready."""
        with self._lock:
            participants = tuple(sorted(c for c, h in self.clients.items() if h.connected))
        if len(participants) <= MIN_CLIENTS - 1:
            raise TooFewClients(
                f"{len(participants)} clients connected; need more than {MIN_CLIENTS - 1}"
            )
        session_id = bytes.fromhex(request.session_id) if request.session_id else uuid.uuid4().bytes
        if len(session_id) != 16:
            raise ValueError("session_id must be 16 bytes of hex")

        if request.scheme == "prediction":
            cached = self._cache_load(request, participants)
            if cached is not None:
                return cached

        sess = self._make_session(session_id, request, participants)
        with self._lock:
            if session_id in self.sessions:
                raise ValueError(f"session {session_id.hex()} already exists")
            self.sessions[session_id] = sess

        try:
            self._start_session(sess)
        except Exception as e:
            self._abort_session(session_id, str(e))
            raise SessionAborted(str(e)) from e

        if not sess.done.wait(timeout=self.config.session_timeout):
            self._abort_session(session_id, "session timed out")
            raise SessionAborted("session timed out")
        if sess.error is not None:
            raise SessionAborted(sess.error)
        assert sess.result is not None
        return sess.result

    def _make_session(self, session_id, request, participants) -> _Session:
        if request.scheme == "query":
            agg = AggSession(
                session_id=session_id.hex(),
                participants=participants,
                spec_id=request.chart.partition.spec_id,
                m=request.chart.partition.num_bins,
                scale=1.0,
            )
            return _QuerySession(session_id, request, participants, agg)
        return _PredictionSession(
            session_id, request, participants, request.model_config(), request.train_config()
        )

    def _start_session(self, sess: _Session) -> None:
        request = sess.request
        with self._lock:
            pubkeys = {str(p): self.clients[p].pubkey.hex() for p in sess.participants}
        scale = 1.0 if request.scheme == "query" else PARAM_SCALE
        tcfg = sess.tcfg if isinstance(sess, _PredictionSession) else None
        start_payload = tp.json_payload(
            {
                "scheme": request.scheme,
                "roster": list(sess.participants),
                "pubkeys": pubkeys,
                "scale": scale,
                "seed": request.seed,
                "train": dataclasses.asdict(tcfg) if tcfg else None,
            }
        )
        chart_payload = tp.json_payload(
            {"partition": request.chart.partition.to_dict(), "scope": request.scope.to_dict()}
        )
        for p in sess.participants:
            self._send_to(p, tp.SESSION_START, sess.id, start_payload)
        # prediction clients respond with the round-0 scale consensus on their own
        for p in sess.participants:
            self._send_to(p, tp.CHART_REQUEST, sess.id, chart_payload)

    # -- progress streaming ------------------------------------------------------

    def subscribe(self, session_hex: str) -> tuple[list[dict], queue.Queue]:
        """Past round reports plus a live queue of (event, payload) tuples."""
        try:
            session_id = bytes.fromhex(session_hex)
        except ValueError as e:
            raise UnknownSession(session_hex) from e
        with self._lock:
            sess = self.sessions.get(session_id)
        if sess is None:
            raise UnknownSession(session_hex)
        with sess.lock:
            past = [r.to_dict() for r in sess.reports]
            q: queue.Queue = queue.Queue()
            if sess.done.is_set():
                if sess.error is not None:
                    q.put(("error", {"reason": sess.error}))
                elif sess.result is not None:
                    q.put(("result", sess.result.to_dict()))
            else:
                sess.subscribers.append(q)
            return past, q

    def training_progress(self, session_hex: str, timeout: float = 60.0):
        """Iterator over RoundReports for an active prediction session, in order."""
        past, q = self.subscribe(session_hex)
        for d in past:
            yield RoundReport.from_dict(d)
        while True:
            try:
                event, payload = q.get(timeout=timeout)
            except queue.Empty:
                raise UnknownSession(f"no progress from session {session_hex} in {timeout}s")
            if event == "report":
                yield RoundReport.from_dict(payload)
            else:
                return

    # -- model cache ---------------------------------------------------------------

    def _cache_key(self, request: QueryRequest, participants: tuple[int, ...]) -> str:
        blob = json.dumps(
            {
                "scope": request.scope.to_dict(),
                "partition": request.chart.partition.to_dict(),
                "train": dataclasses.asdict(request.train_config()),
                "model": dataclasses.asdict(request.model_config()),
                "roster": list(participants),
            },
            sort_keys=True,
            separators=(",", ":"),
        )
        return hashlib.sha256(blob.encode()).hexdigest()[:24]

    def _cache_store(self, sess: _PredictionSession) -> None:
        key = self._cache_key(sess.request, sess.participants)
        base = Path(self.config.cache_dir) / key
        # f64 so a cache hit reproduces the fresh chart bit for bit
        base.with_suffix(".params").write_bytes(sess.params.to_bytes(dtype="<f8"))
        base.with_suffix(".reports.json").write_text(
            json.dumps([r.to_dict() for r in sess.reports])
        )

    def _cache_load(self, request: QueryRequest, participants) -> Optional[QueryResult]:
        key = self._cache_key(request, participants)
        base = Path(self.config.cache_dir) / key
        params_file = base.with_suffix(".params")
        if not params_file.exists():
            return None
        params = ModelParams.from_bytes(params_file.read_bytes())
        reports = [
            RoundReport.from_dict(r)
            for r in json.loads(base.with_suffix(".reports.json").read_text())
        ]
        vf = predict_all(params, request.chart.partition.num_bins, spec_id=request.chart.partition.spec_id)
        chart = compose_prediction(vf, len(participants), request.chart)
        log.info("cache hit %s for prediction query", key[:8])
        return QueryResult(
            chart=chart,
            scheme="prediction",
            exact=False,
            session_id=request.session_id or uuid.uuid4().hex,
            n_clients=len(participants),
            reports=reports,
            timings={},
            cached=True,
        )
