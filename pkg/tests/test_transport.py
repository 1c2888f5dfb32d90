import socket
import threading

import numpy as np
import pytest

from fedviz import transport as tp
from fedviz.secagg import RingVector


def env(msg_type=tp.HELLO, payload=b"", session=tp.NO_SESSION, sender=1, recipient=tp.COORDINATOR_ID):
    return tp.Envelope(msg_type, session, sender, recipient, payload)


class TestFraming:
    def test_round_trip_every_type(self):
        session = bytes(range(16))
        for msg_type in tp.MESSAGE_TYPES:
            e = env(msg_type=msg_type, payload=b"payload-bytes", session=session, sender=3, recipient=7)
            assert tp.unframe(tp.frame(e)) == e

    def test_round_trip_empty_payload(self):
        e = env(payload=b"")
        assert tp.unframe(tp.frame(e)) == e

    def test_empty_stream_rejected(self):
        with pytest.raises(tp.FrameError):
            tp.unframe(b"")

    def test_truncation_fuzz(self):
        data = tp.frame(env(msg_type=tp.MASKED_UPLOAD, payload=b"0123456789"))
        for cut in range(len(data)):
            with pytest.raises(tp.FrameError):
                tp.unframe(data[:cut])

    def test_trailing_garbage_rejected(self):
        data = tp.frame(env(payload=b"x"))
        with pytest.raises(tp.FrameError):
            tp.unframe(data + b"y")

    def test_unknown_type_tag_rejected(self):
        data = bytearray(tp.frame(env()))
        data[4] = 250
        with pytest.raises(tp.FrameError):
            tp.unframe(bytes(data))

    def test_oversize_length_rejected(self):
        import struct

        data = struct.pack("<I", tp.MAX_FRAME + 1) + b"\x00" * 32
        with pytest.raises(tp.FrameError):
            tp.unframe(data)

    def test_wire_layout_documented_exactly(self):
        session = bytes(range(16))
        e = env(msg_type=tp.ABORT, payload=b"ab", session=session, sender=0x0102, recipient=0x0304)
        data = tp.frame(e)
        assert data[0:4] == (21 + 2).to_bytes(4, "little")
        assert data[4] == tp.ABORT
        assert data[5:21] == session
        assert data[21:23] == (0x0102).to_bytes(2, "little")
        assert data[23:25] == (0x0304).to_bytes(2, "little")
        assert data[25:] == b"ab"


class TestPayloadHelpers:
    def test_ring_pack_round_trip(self):
        rv = RingVector(np.array([1, 2**63, 2**64 - 1], dtype=np.uint64), scale=4.0)
        data = tp.pack_ring(rv)
        back, end = tp.unpack_ring(data, 0, scale=4.0)
        assert end == len(data)
        assert np.array_equal(back.elems, rv.elems)
        assert back.scale == 4.0

    def test_ring_truncation(self):
        data = tp.pack_ring(RingVector(np.arange(4, dtype=np.uint64)))
        with pytest.raises(tp.FrameError):
            tp.unpack_ring(data[:-1])

    def test_header_and_ring_round_trip(self):
        rv = RingVector(np.arange(5, dtype=np.uint64))
        payload = tp.header_and_ring({"round": 3, "loss": 0.5}, rv)
        header, back = tp.parse_header_and_ring(payload)
        assert header == {"round": 3, "loss": 0.5}
        assert np.array_equal(back.elems, rv.elems)
        with pytest.raises(tp.FrameError):
            tp.parse_header_and_ring(payload + b"extra")

    def test_header_and_blob_round_trip(self):
        payload = tp.header_and_blob({"round": 1}, b"\x00\x01\x02")
        header, blob = tp.parse_header_and_blob(payload)
        assert header == {"round": 1}
        assert blob == b"\x00\x01\x02"

    def test_mask_exchange_round_prefix(self):
        payload = tp.mask_exchange_payload(7, b"sealed")
        assert tp.parse_mask_exchange(payload) == (7, b"sealed")


class TestSealing:
    def _pair(self, session=b"\x01" * 16):
        priv1, pub1 = tp.generate_keypair()
        priv2, pub2 = tp.generate_keypair()
        pubs = {1: pub1, 2: pub2}
        s1 = tp.PeerSealer(1, priv1, pubs, session)
        s2 = tp.PeerSealer(2, priv2, pubs, session)
        return s1, s2, pubs

    def test_seal_unseal_round_trip(self):
        s1, s2, _ = self._pair()
        blob = s1.seal(2, b"the mask bytes", round_no=3)
        assert s2.unseal(1, blob, round_no=3) == b"the mask bytes"

    def test_coordinator_cannot_unseal(self):
        s1, _, pubs = self._pair()
        blob = s1.seal(2, b"secret", round_no=0)
        # the relay only ever has public keys; any other keypair fails to unseal
        eve_priv, _ = tp.generate_keypair()
        eve = tp.PeerSealer(2, eve_priv, pubs, b"\x01" * 16)
        with pytest.raises(tp.SealError):
            eve.unseal(1, blob, round_no=0)

    def test_tampered_ciphertext_rejected(self):
        s1, s2, _ = self._pair()
        blob = bytearray(s1.seal(2, b"mask", round_no=1))
        blob[len(blob) // 2] ^= 0x01
        with pytest.raises(tp.SealError):
            s2.unseal(1, bytes(blob), round_no=1)

    def test_wrong_round_context_rejected(self):
        s1, s2, _ = self._pair()
        blob = s1.seal(2, b"mask", round_no=1)
        with pytest.raises(tp.SealError):
            s2.unseal(1, blob, round_no=2)

    def test_unknown_peer(self):
        s1, _, _ = self._pair()
        with pytest.raises(tp.UnknownPeer):
            s1.seal(9, b"x")


class TestQueueChannel:
    def test_duplex_send_recv(self):
        a, b = tp.queue_pair()
        e = env(payload=b"hi")
        a.send(e)
        assert b.recv(timeout=1) == e
        b.send(e)
        assert a.recv(timeout=1) == e

    def test_timeout_returns_none(self):
        a, b = tp.queue_pair()
        assert b.recv(timeout=0.01) is None

    def test_close_signals_peer(self):
        a, b = tp.queue_pair()
        a.close()
        with pytest.raises(tp.ChannelClosed):
            b.recv(timeout=1)


class TestSocketChannel:
    def _connected_pair(self):
        listener = socket.socket()
        listener.bind(("127.0.0.1", 0))
        listener.listen(1)
        port = listener.getsockname()[1]
        client = socket.create_connection(("127.0.0.1", port))
        server, _ = listener.accept()
        listener.close()
        return tp.SocketEndpoint(client), tp.SocketEndpoint(server)

    def test_send_recv_large_payload(self):
        a, b = self._connected_pair()
        payload = bytes(np.random.default_rng(0).integers(0, 256, 300_000, dtype=np.uint8))
        e = env(msg_type=tp.MASKED_UPLOAD, payload=payload)
        a.send(e)
        got = b.recv(timeout=5)
        assert got == e
        a.close()
        b.close()

    def test_interleaved_frames(self):
        a, b = self._connected_pair()
        envs = [env(payload=bytes([i]) * i) for i in range(1, 20)]
        t = threading.Thread(target=lambda: [a.send(e) for e in envs])
        t.start()
        got = [b.recv(timeout=5) for _ in envs]
        t.join()
        assert got == envs
        a.close()
        b.close()

    def test_peer_close_raises(self):
        a, b = self._connected_pair()
        a.close()
        with pytest.raises(tp.ChannelClosed):
            b.recv(timeout=2)
        b.close()
