"""Client-side protocol engine.

A node owns one shard of raw records and a connection to the coordinator.
It answers session messages by running the local pipeline (scope, binning,
aggregation) and the per-scheme steps: mask exchange plus masked upload for
exact queries, or per-round local training with masked parameter uploads for
the prediction scheme. Raw records never enter any outgoing payload.
"""

from __future__ import annotations

import logging
import os
import threading
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import transport as tp
from .features import DataRecord, FeatureVector, PartitionSpec, ScopeFilter, aggregate, apply_scope
from .fedmodel import (
    ModelParams,
    TrainConfig,
    client_label_scale,
    local_train,
    round_seed,
)
from .secagg import PairwiseMask, RingVector, encode_fixed, masked_upload, sample_masks

log = logging.getLogger("fedviz.client")


@dataclass
class _SessionState:
    scheme: str
    roster: tuple[int, ...]
    scale: float
    seed: int
    sealer: tp.PeerSealer
    partition: Optional[PartitionSpec] = None
    scope: Optional[ScopeFilter] = None
    vf: Optional[FeatureVector] = None
    label_scale: float = 1.0
    tcfg: Optional[TrainConfig] = None
    # round currently awaiting peer masks; -1 when idle
    pending_round: int = -1
    pending_ring: Optional[RingVector] = None
    pending_header: dict = field(default_factory=dict)
    sent_masks: list = field(default_factory=list)
    received: dict = field(default_factory=dict)  # round -> {peer: RingVector}


class ClientNode:
    """One federated client: shard of records, keypair, message pump."""

    def __init__(
        self,
        client_id: int,
        records: list[DataRecord],
        endpoint,
        mask_entropy: Optional[int] = None,
    ) -> None:
        self.id = client_id
        self.records = records
        self.ep = endpoint
        self.private_key, self.public_key = tp.generate_keypair()
        # private entropy for mask sampling; never shared, so uploads stay masked
        self._mask_entropy = (
            mask_entropy if mask_entropy is not None else int.from_bytes(os.urandom(8), "little")
        )
        self._sessions: dict[bytes, _SessionState] = {}
        self._thread: Optional[threading.Thread] = None
        self._stop = threading.Event()

    # -- lifecycle -----------------------------------------------------------

    def start(self) -> None:
        self.ep.send(
            tp.Envelope(
                tp.HELLO,
                tp.NO_SESSION,
                self.id,
                tp.COORDINATOR_ID,
                tp.json_payload({"records": len(self.records), "pubkey": self.public_key.hex()}),
            )
        )
        self._thread = threading.Thread(target=self.run, name=f"client-{self.id}", daemon=True)
        self._thread.start()

    def stop(self) -> None:
        self._stop.set()
        self.ep.close()
        if self._thread is not None:
            self._thread.join(timeout=5)

    def wait(self) -> None:
        """Block until the pump exits (coordinator closed the channel)."""
        if self._thread is not None:
            self._thread.join()

    def run(self) -> None:
        while not self._stop.is_set():
            try:
                env = self.ep.recv(timeout=0.2)
            except tp.ChannelClosed:
                return
            if env is None:
                continue
            try:
                self._dispatch(env)
            except Exception:
                log.exception("client %d failed handling %s", self.id, env.type_name)
                self._send(tp.ABORT, env.session, tp.json_payload({"reason": "client error"}))
                self._sessions.pop(env.session, None)

    def _send(self, msg_type: int, session: bytes, payload: bytes, recipient: int = tp.COORDINATOR_ID) -> None:
        self.ep.send(tp.Envelope(msg_type, session, self.id, recipient, payload))

    # -- dispatch ------------------------------------------------------------

    def _dispatch(self, env: tp.Envelope) -> None:
        if env.msg_type == tp.SESSION_START:
            self._on_session_start(env)
        elif env.msg_type == tp.CHART_REQUEST:
            self._on_chart_request(env)
        elif env.msg_type == tp.MASK_EXCHANGE:
            self._on_mask_exchange(env)
        elif env.msg_type == tp.PARAMS_BROADCAST:
            self._on_params_broadcast(env)
        elif env.msg_type == tp.ABORT:
            self._sessions.pop(env.session, None)
        elif env.msg_type in (tp.HELLO, tp.ROUND_REPORT):
            pass  # ack / monitor traffic
        else:
            log.warning("client %d ignoring unexpected %s", self.id, env.type_name)

    def _on_session_start(self, env: tp.Envelope) -> None:
        d = tp.parse_json(env.payload)
        roster = tuple(int(i) for i in d["roster"])
        pubkeys = {int(k): bytes.fromhex(v) for k, v in d["pubkeys"].items()}
        sealer = tp.PeerSealer(self.id, self.private_key, pubkeys, env.session)
        tcfg = TrainConfig(**d["train"]) if d.get("train") else None
        self._sessions[env.session] = _SessionState(
            scheme=d["scheme"],
            roster=roster,
            scale=float(d["scale"]),
            seed=int(d["seed"]),
            sealer=sealer,
            tcfg=tcfg,
        )

    def _on_chart_request(self, env: tp.Envelope) -> None:
        st = self._require(env.session)
        d = tp.parse_json(env.payload)
        st.partition = PartitionSpec.from_dict(d["partition"])
        st.scope = ScopeFilter.from_dict(d["scope"])
        t0 = time.monotonic()
        scoped = apply_scope(self.records, st.scope)
        st.vf = aggregate(scoped, st.partition)
        st.label_scale = client_label_scale(st.vf.values)
        t_agg = time.monotonic() - t0
        if st.scheme == "query":
            ring = encode_fixed(st.vf, st.scale)
            self._begin_masked_upload(
                env.session, st, round_no=0, ring=ring, header={"t_aggregate": t_agg}
            )
        else:
            # round 0 = scale consensus: secure-sum of the scalar scale votes,
            # so nobody reveals its own peak value before training starts
            ring = encode_fixed(FeatureVector("", np.array([st.label_scale])), st.scale)
            self._begin_masked_upload(
                env.session, st, round_no=0, ring=ring,
                header={"round": 0, "loss": 0.0, "t_aggregate": t_agg},
            )

    def _on_params_broadcast(self, env: tp.Envelope) -> None:
        st = self._require(env.session)
        header, blob = tp.parse_header_and_blob(env.payload)
        round_no = int(header["round"])
        # the consensus label_scale arrives inside the broadcast parameters
        local = ModelParams.from_bytes(blob)
        if st.vf is None or st.tcfg is None:
            raise tp.FrameError("params broadcast before chart request")
        cfg = TrainConfig(
            rounds=st.tcfg.rounds,
            epochs=st.tcfg.epochs,
            lr=st.tcfg.lr,
            batch_size=st.tcfg.batch_size,
            seed=round_seed(st.seed, round_no),
            tol=st.tcfg.tol,
        )
        t0 = time.monotonic()
        trained, label_loss = local_train(local, st.vf, cfg)
        t_train = time.monotonic() - t0
        norm_loss = label_loss / local.label_scale**2
        ring = encode_fixed(FeatureVector("", trained.flatten()), scale=st.scale)
        self._begin_masked_upload(
            env.session,
            st,
            round_no=round_no,
            ring=ring,
            header={"round": round_no, "loss": norm_loss, "t_train": t_train},
        )

    def _on_mask_exchange(self, env: tp.Envelope) -> None:
        st = self._require(env.session)
        round_no, sealed = tp.parse_mask_exchange(env.payload)
        plaintext = st.sealer.unseal(env.sender, sealed, round_no)
        rv, _ = tp.unpack_ring(plaintext, 0, st.scale)
        st.received.setdefault(round_no, {})[env.sender] = rv
        self._try_finish_upload(env.session, st)

    # -- masked upload flow ----------------------------------------------------

    def _begin_masked_upload(
        self, session: bytes, st: _SessionState, round_no: int, ring: RingVector, header: dict
    ) -> None:
        peers = [p for p in st.roster if p != self.id]
        t0 = time.monotonic()
        seed = round_seed(self._mask_entropy, round_no, int.from_bytes(session[:4], "little"))
        st.sent_masks = sample_masks(self.id, peers, len(ring), seed, st.scale)
        header["t_mask_gen"] = time.monotonic() - t0
        st.pending_round = round_no
        st.pending_ring = ring
        st.pending_header = header
        for mask in st.sent_masks:
            sealed = st.sealer.seal(mask.to, tp.pack_ring(mask.r), round_no)
            self._send(
                tp.MASK_EXCHANGE,
                session,
                tp.mask_exchange_payload(round_no, sealed),
                recipient=mask.to,
            )
        self._try_finish_upload(session, st)

    def _try_finish_upload(self, session: bytes, st: _SessionState) -> None:
        if st.pending_round < 0 or st.pending_ring is None:
            return
        peers = [p for p in st.roster if p != self.id]
        got = st.received.get(st.pending_round, {})
        if not all(p in got for p in peers):
            return
        received = [PairwiseMask(p, self.id, got[p]) for p in peers]
        t0 = time.monotonic()
        upload = masked_upload(st.pending_ring, st.sent_masks, received, session=session.hex())
        st.pending_header["t_encode"] = time.monotonic() - t0
        msg_type = tp.MASKED_UPLOAD if st.scheme == "query" else tp.PARAMS_UPLOAD
        self._send(msg_type, session, tp.header_and_ring(st.pending_header, upload.payload))
        st.received.pop(st.pending_round, None)
        st.pending_round = -1
        st.pending_ring = None
        st.pending_header = {}
        st.sent_masks = []

    def _require(self, session: bytes) -> _SessionState:
        st = self._sessions.get(session)
        if st is None:
            raise tp.FrameError(f"message for unknown session {session.hex()}")
        return st
