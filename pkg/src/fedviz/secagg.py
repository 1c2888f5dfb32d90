"""Query-based scheme: exact secure sums via pairwise additive masks.

All arithmetic happens in the ring Z_{2^64} (numpy uint64 with natural
wraparound). Feature values enter the ring through a two's-complement
fixed-point encoding. Each ordered client pair (i, j) holds a random vector
R_ij; client i uploads its features plus sum_j (R_ij - R_ji). Those
perturbations are antisymmetric per pair, so the coordinator's elementwise
sum of uploads equals the plaintext sum exactly, while any single upload is
uniformly masked.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Optional, Sequence

import numpy as np

from .features import FeatureVector

RING_BITS = 64
# fixed-point magnitudes stay below 2^52 so N-way sums keep integer headroom
ENCODE_LIMIT = float(2**52)

DEFAULT_SCALE = 1.0  # counts are integers; exact with scale 1
PARAM_SCALE = float(2**24)  # model parameters need fractional resolution


class OverflowRisk(ValueError):
    """Scaled magnitude too close to the ring size for a lossless round trip."""


class PeerSetMismatch(ValueError):
    """Sent and received mask sets do not cover the same peers."""


class IncompleteSession(RuntimeError):
    """Aggregation attempted without one upload from every participant."""


class ProtocolStateError(RuntimeError):
    """A session message arrived out of order for its sender's state machine."""


@dataclass
class RingVector:
    """Array of ring elements plus the fixed-point scale they were encoded at."""

    elems: np.ndarray
    scale: float = DEFAULT_SCALE

    def __post_init__(self) -> None:
        self.elems = np.asarray(self.elems, dtype=np.uint64)
        if self.scale <= 0:
            raise ValueError("scale must be positive")

    def __len__(self) -> int:
        return len(self.elems)


@dataclass(frozen=True)
class PairwiseMask:
    """Random ring vector R_ij sampled by client i for peer j."""

    frm: int
    to: int
    r: RingVector

    def __post_init__(self) -> None:
        if self.frm == self.to:
            raise ValueError("mask endpoints must differ")


@dataclass(frozen=True)
class MaskedUpload:
    """The only numeric payload a client sends the coordinator in this scheme."""

    client: int
    payload: RingVector
    session: str = ""


def encode_fixed(v: FeatureVector, scale: float = DEFAULT_SCALE) -> RingVector:
    """Round v * scale into two's-complement ring elements."""
    scaled = np.asarray(v.values, dtype=np.float64) * scale
    if np.any(~np.isfinite(scaled)) or np.any(np.abs(scaled) >= ENCODE_LIMIT):
        raise OverflowRisk(f"|value|*{scale} must stay below 2^52")
    return RingVector(np.round(scaled).astype(np.int64).view(np.uint64), scale)


def decode_fixed(rv: RingVector, spec_id: str = "") -> FeatureVector:
    """Two's-complement interpretation divided by the scale; inverse of encode_fixed."""
    return FeatureVector(spec_id, rv.elems.view(np.int64).astype(np.float64) / rv.scale)


def _mask_rng(seed: int, self_id: int, peer_id: int) -> np.random.Generator:
    return np.random.default_rng([seed & 0xFFFFFFFF, seed >> 32, self_id, peer_id])


def sample_masks(
    self_id: int,
    peers: Sequence[int],
    m: int,
    rng_seed: int,
    scale: float = DEFAULT_SCALE,
) -> list[PairwiseMask]:
    """One uniform ring vector per peer; deterministic given the seed."""
    if self_id in peers:
        raise ValueError("client cannot mask against itself")
    masks = []
    for peer in peers:
        rng = _mask_rng(rng_seed, self_id, peer)
        elems = rng.integers(0, 2**64, size=m, dtype=np.uint64)
        masks.append(PairwiseMask(self_id, peer, RingVector(elems, scale)))
    return masks


def masked_upload(
    vf: RingVector,
    sent: Iterable[PairwiseMask],
    received: Iterable[PairwiseMask],
    session: str = "",
) -> MaskedUpload:
    """payload = vf + sum_j (R_ij - R_ji) in the ring.

    ``sent`` holds this client's masks R_ij, ``received`` the peers' R_ji.
    """
    sent = list(sent)
    received = list(received)
    if not sent and not received:
        return MaskedUpload(-1, RingVector(vf.elems.copy(), vf.scale), session)
    me = sent[0].frm if sent else received[0].to
    sent_peers = {mk.to for mk in sent}
    recv_peers = {mk.frm for mk in received}
    if sent_peers != recv_peers:
        raise PeerSetMismatch(f"sent to {sorted(sent_peers)} but received from {sorted(recv_peers)}")
    payload = vf.elems.copy()
    for mk in sent:
        if len(mk.r) != len(payload):
            raise PeerSetMismatch("mask length does not match feature length")
        payload += mk.r.elems
    for mk in received:
        if len(mk.r) != len(payload):
            raise PeerSetMismatch("mask length does not match feature length")
        payload -= mk.r.elems
    return MaskedUpload(me, RingVector(payload, vf.scale), session)


def aggregate_uploads(
    uploads: Sequence[MaskedUpload],
    participants: Optional[Iterable[int]] = None,
) -> RingVector:
    """Elementwise ring sum of uploads; mask pairs cancel, leaving the exact sum."""
    if not uploads:
        raise IncompleteSession("no uploads")
    if participants is not None:
        missing = set(participants) - {u.client for u in uploads}
        if missing:
            raise IncompleteSession(f"missing uploads from clients {sorted(missing)}")
    seen = set()
    for u in uploads:
        if u.client in seen:
            raise IncompleteSession(f"duplicate upload from client {u.client}")
        seen.add(u.client)
    m = len(uploads[0].payload)
    scale = uploads[0].payload.scale
    total = np.zeros(m, dtype=np.uint64)
    for u in uploads:
        if len(u.payload) != m:
            raise IncompleteSession("uploads disagree on vector length")
        if u.payload.scale != scale:
            raise IncompleteSession("uploads disagree on fixed-point scale")
        total += u.payload.elems
    return RingVector(total, scale)


# ---------------------------------------------------------------------------
# Session state machine, driven by the coordinator. Mask exchange messages may
# arrive in any order; a client's upload is accepted only after every pair
# involving it has exchanged masks in both directions.
# ---------------------------------------------------------------------------

MIN_CLIENTS = 4  # the scheme leaks against collusion when N <= 3


class ClientPhase(Enum):
    INIT = "init"
    MASKS_EXCHANGED = "masks_exchanged"
    UPLOADED = "uploaded"


@dataclass
class AggSession:
    """Per-query secure-sum session: participant roster, spec binding, phases."""

    session_id: str
    participants: tuple[int, ...]
    spec_id: str
    m: int
    scale: float = DEFAULT_SCALE
    allow_small: bool = False  # test-only override of the N > 3 gate
    exchanged: set = field(default_factory=set)  # ordered (frm, to) pairs relayed
    uploads: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        n = len(self.participants)
        if len(set(self.participants)) != n:
            raise ValueError("duplicate participant ids")
        if n <= 3 and not self.allow_small:
            raise ValueError(f"secure aggregation needs more than 3 clients, got {n}")

    @property
    def n(self) -> int:
        return len(self.participants)

    def phase(self, client: int) -> ClientPhase:
        if client in self.uploads:
            return ClientPhase.UPLOADED
        if self._masks_complete(client):
            return ClientPhase.MASKS_EXCHANGED
        return ClientPhase.INIT

    def _masks_complete(self, client: int) -> bool:
        others = [p for p in self.participants if p != client]
        return all((client, o) in self.exchanged and (o, client) in self.exchanged for o in others)

    def record_mask_exchange(self, frm: int, to: int) -> None:
        if frm not in self.participants or to not in self.participants:
            raise ProtocolStateError(f"mask exchange {frm}->{to} outside session roster")
        if frm == to:
            raise ProtocolStateError("mask exchange endpoints must differ")
        self.exchanged.add((frm, to))

    def record_upload(self, upload: MaskedUpload) -> None:
        c = upload.client
        if c not in self.participants:
            raise ProtocolStateError(f"upload from unknown client {c}")
        if c in self.uploads:
            raise ProtocolStateError(f"duplicate upload from client {c}")
        if not self._masks_complete(c):
            raise ProtocolStateError(f"upload from client {c} before mask exchange completed")
        if len(upload.payload) != self.m:
            raise ProtocolStateError(f"upload length {len(upload.payload)} != session M {self.m}")
        self.uploads[c] = upload

    @property
    def complete(self) -> bool:
        return len(self.uploads) == self.n

    def aggregate(self) -> RingVector:
        return aggregate_uploads(list(self.uploads.values()), participants=self.participants)
