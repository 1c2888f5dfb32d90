"""Wire protocol between coordinator and clients.

Frame layout (all little-endian):

    4 bytes  length of everything after this field (21 + payload length)
    1 byte   message type tag
    16 bytes session id
    2 bytes  sender id
    2 bytes  recipient id
    payload

Client ids are u16; the coordinator is address 0xFFFF. Peer-to-peer traffic
(mask exchange) travels as sealed envelopes relayed by the coordinator: the
payload is authenticated encryption between the peer pair, so the coordinator
forwards it but cannot read it. Two interchangeable channel flavors exist:
in-process queue pairs (simulator, deterministic tests) and TCP sockets.
"""

from __future__ import annotations

import json
import queue
import socket
import struct
import threading
from dataclasses import dataclass
from typing import Optional

import numpy as np
from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives import hashes, serialization
from cryptography.hazmat.primitives.asymmetric import x25519
from cryptography.hazmat.primitives.ciphers.aead import ChaCha20Poly1305
from cryptography.hazmat.primitives.kdf.hkdf import HKDF

from .secagg import RingVector

COORDINATOR_ID = 0xFFFF
NO_SESSION = b"\x00" * 16
HEADER_LEN = 4 + 1 + 16 + 2 + 2
MAX_FRAME = 256 * 1024 * 1024

# the closed message set
HELLO = 1
SESSION_START = 2
MASK_EXCHANGE = 3
MASKED_UPLOAD = 4
PARAMS_BROADCAST = 5
PARAMS_UPLOAD = 6
ROUND_REPORT = 7
CHART_REQUEST = 8
ABORT = 9

MESSAGE_TYPES = {
    HELLO: "Hello",
    SESSION_START: "SessionStart",
    MASK_EXCHANGE: "MaskExchange",
    MASKED_UPLOAD: "MaskedUpload",
    PARAMS_BROADCAST: "ParamsBroadcast",
    PARAMS_UPLOAD: "ParamsUpload",
    ROUND_REPORT: "RoundReport",
    CHART_REQUEST: "ChartRequest",
    ABORT: "Abort",
}


class FrameError(ValueError):
    """Malformed, truncated, or over-length frame."""


class UnknownPeer(KeyError):
    """Sealed envelope addressed to a client outside the session."""


class SealError(RuntimeError):
    """Authentication failure when unsealing a peer message."""


class ChannelClosed(ConnectionError):
    """The other side went away."""


@dataclass(frozen=True)
class Envelope:
    msg_type: int
    session: bytes
    sender: int
    recipient: int
    payload: bytes

    def __post_init__(self) -> None:
        if self.msg_type not in MESSAGE_TYPES:
            raise FrameError(f"unknown message type {self.msg_type}")
        if len(self.session) != 16:
            raise FrameError("session id must be 16 bytes")

    @property
    def type_name(self) -> str:
        return MESSAGE_TYPES[self.msg_type]


def frame(env: Envelope) -> bytes:
    body_len = HEADER_LEN - 4 + len(env.payload)
    return (
        struct.pack("<IB16sHH", body_len, env.msg_type, env.session, env.sender, env.recipient)
        + env.payload
    )


def unframe(data: bytes) -> Envelope:
    """Decode one complete frame; rejects truncation and trailing bytes."""
    if len(data) < HEADER_LEN:
        raise FrameError(f"frame too short ({len(data)} bytes)")
    body_len, msg_type, session, sender, recipient = struct.unpack_from("<IB16sHH", data, 0)
    if body_len > MAX_FRAME:
        raise FrameError(f"frame length {body_len} exceeds limit")
    if len(data) != 4 + body_len:
        raise FrameError(f"frame length field says {body_len}, got {len(data) - 4} bytes")
    payload = data[HEADER_LEN:]
    return Envelope(msg_type, session, sender, recipient, payload)


# -- payload helpers --------------------------------------------------------


def json_payload(obj: dict) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()


def parse_json(payload: bytes) -> dict:
    try:
        return json.loads(payload.decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FrameError(f"bad JSON payload: {e}") from e


def pack_ring(rv: RingVector) -> bytes:
    """Length-prefixed little-endian u64 array."""
    return struct.pack("<I", len(rv.elems)) + rv.elems.astype("<u8").tobytes()


def unpack_ring(data: bytes, offset: int = 0, scale: float = 1.0) -> tuple[RingVector, int]:
    if len(data) < offset + 4:
        raise FrameError("ring vector truncated")
    (count,) = struct.unpack_from("<I", data, offset)
    end = offset + 4 + count * 8
    if len(data) < end:
        raise FrameError("ring vector truncated")
    elems = np.frombuffer(data[offset + 4 : end], dtype="<u8").astype(np.uint64)
    return RingVector(elems, scale), end


def header_and_ring(header: dict, rv: RingVector) -> bytes:
    """JSON header + ring vector, both length-prefixed; used by upload messages."""
    h = json_payload(header)
    return struct.pack("<I", len(h)) + h + pack_ring(rv)


def parse_header_and_ring(payload: bytes, scale: float = 1.0) -> tuple[dict, RingVector]:
    if len(payload) < 4:
        raise FrameError("payload truncated")
    (hlen,) = struct.unpack_from("<I", payload, 0)
    if len(payload) < 4 + hlen:
        raise FrameError("payload header truncated")
    header = parse_json(payload[4 : 4 + hlen])
    rv, end = unpack_ring(payload, 4 + hlen, scale)
    if end != len(payload):
        raise FrameError("trailing bytes after ring vector")
    return header, rv


def header_and_blob(header: dict, blob: bytes) -> bytes:
    h = json_payload(header)
    return struct.pack("<I", len(h)) + h + blob


def parse_header_and_blob(payload: bytes) -> tuple[dict, bytes]:
    if len(payload) < 4:
        raise FrameError("payload truncated")
    (hlen,) = struct.unpack_from("<I", payload, 0)
    if len(payload) < 4 + hlen:
        raise FrameError("payload header truncated")
    return parse_json(payload[4 : 4 + hlen]), payload[4 + hlen :]


# -- sealed peer channels ---------------------------------------------------


def generate_keypair() -> tuple[x25519.X25519PrivateKey, bytes]:
    priv = x25519.X25519PrivateKey.generate()
    pub = priv.public_key().public_bytes(
        serialization.Encoding.Raw, serialization.PublicFormat.Raw
    )
    return priv, pub


class PeerSealer:
    """Authenticated encryption between one client and each of its session peers.

    Keys are derived per pair from an X25519 exchange plus the session id, so
    both ends of a pair arrive at the same key and the coordinator (which only
    ever sees public keys) cannot unseal anything it relays.
    """

    def __init__(
        self,
        my_id: int,
        private_key: x25519.X25519PrivateKey,
        peer_pubkeys: dict[int, bytes],
        session: bytes,
    ) -> None:
        self.my_id = my_id
        self.session = session
        self._ciphers: dict[int, ChaCha20Poly1305] = {}
        for peer, pub in peer_pubkeys.items():
            if peer == my_id:
                continue
            shared = private_key.exchange(x25519.X25519PublicKey.from_public_bytes(pub))
            lo, hi = sorted((my_id, peer))
            key = HKDF(
                algorithm=hashes.SHA256(),
                length=32,
                salt=session,
                info=b"fedviz-pair" + struct.pack("<HH", lo, hi),
            ).derive(shared)
            self._ciphers[peer] = ChaCha20Poly1305(key)

    def _aad(self, frm: int, to: int, round_no: int) -> bytes:
        return self.session + struct.pack("<HHH", frm, to, round_no)

    def seal(self, to: int, plaintext: bytes, round_no: int = 0) -> bytes:
        if to not in self._ciphers:
            raise UnknownPeer(f"no key for peer {to}")
        import os

        nonce = os.urandom(12)
        ct = self._ciphers[to].encrypt(nonce, plaintext, self._aad(self.my_id, to, round_no))
        return nonce + ct

    def unseal(self, frm: int, blob: bytes, round_no: int = 0) -> bytes:
        if frm not in self._ciphers:
            raise UnknownPeer(f"no key for peer {frm}")
        if len(blob) < 12:
            raise SealError("sealed blob too short")
        try:
            return self._ciphers[frm].decrypt(
                blob[:12], blob[12:], self._aad(frm, self.my_id, round_no)
            )
        except InvalidTag as e:
            raise SealError("authentication failed") from e


def mask_exchange_payload(round_no: int, sealed: bytes) -> bytes:
    # plaintext round prefix lets the coordinator dedupe relays without unsealing
    return struct.pack("<H", round_no) + sealed


def parse_mask_exchange(payload: bytes) -> tuple[int, bytes]:
    if len(payload) < 2:
        raise FrameError("mask exchange payload truncated")
    (round_no,) = struct.unpack_from("<H", payload, 0)
    return round_no, payload[2:]


# -- channels ---------------------------------------------------------------

_CLOSE = object()


class QueueEndpoint:
    """One end of an in-process duplex channel."""

    def __init__(self, inbox: queue.Queue, outbox: queue.Queue) -> None:
        self._inbox = inbox
        self._outbox = outbox
        self._closed = False

    def send(self, env: Envelope) -> None:
        if self._closed:
            raise ChannelClosed("endpoint closed")
        self._outbox.put(env)

    def recv(self, timeout: Optional[float] = None) -> Optional[Envelope]:
        """Next envelope, or None on timeout. Raises ChannelClosed at end of stream."""
        try:
            item = self._inbox.get(timeout=timeout)
        except queue.Empty:
            return None
        if item is _CLOSE:
            raise ChannelClosed("peer closed")
        return item

    def close(self) -> None:
        if not self._closed:
            self._closed = True
            self._outbox.put(_CLOSE)


def queue_pair() -> tuple[QueueEndpoint, QueueEndpoint]:
    a_to_b: queue.Queue = queue.Queue()
    b_to_a: queue.Queue = queue.Queue()
    return QueueEndpoint(b_to_a, a_to_b), QueueEndpoint(a_to_b, b_to_a)


class SocketEndpoint:
    """Framed envelopes over a TCP socket; send is thread-safe."""

    def __init__(self, sock: socket.socket) -> None:
        self._sock = sock
        self._lock = threading.Lock()

    def send(self, env: Envelope) -> None:
        data = frame(env)
        try:
            with self._lock:
                self._sock.sendall(data)
        except OSError as e:
            raise ChannelClosed(str(e)) from e

    def _read_exact(self, n: int, timeout: Optional[float]) -> bytes:
        self._sock.settimeout(timeout)
        buf = b""
        while len(buf) < n:
            try:
                chunk = self._sock.recv(n - len(buf))
            except socket.timeout:
                if buf:
                    continue  # mid-frame: keep waiting for the rest
                raise
            except OSError as e:
                raise ChannelClosed(str(e)) from e
            if not chunk:
                raise ChannelClosed("socket closed")
            buf += chunk
        return buf

    def recv(self, timeout: Optional[float] = None) -> Optional[Envelope]:
        try:
            head = self._read_exact(4, timeout)
        except socket.timeout:
            return None
        (body_len,) = struct.unpack("<I", head)
        if body_len > MAX_FRAME or body_len < HEADER_LEN - 4:
            raise FrameError(f"bad frame length {body_len}")
        body = self._read_exact(body_len, None)
        return unframe(head + body)

    def close(self) -> None:
        try:
            self._sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self._sock.close()
