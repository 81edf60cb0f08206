"""Wire framing, hub delivery, peer config, and TCP socket tests."""

import json
import os
import shutil
import subprocess
import threading
import time

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from falldet.errors import ConfigError, FrameError, TransportError
from falldet.transport import (
    MAX_FRAME_BYTES,
    Envelope,
    InMemoryHub,
    PeerEntry,
    TcpNode,
    frame,
    load_peer_config,
    parse_frame,
    read_frame_from_socket,
    transcript_hash,
)

SID = bytes(range(16))


def make_env(**kw):
    base = dict(session_id=SID, sender=1, msg_type="mpc_round",
                round=3, seq=0, payload=b"\x01" * 16, meta={"op": "mul"})
    base.update(kw)
    return Envelope(**base)


class TestFraming:
    def test_roundtrip_basic(self):
        env = make_env()
        back = parse_frame(frame(env))
        assert back == env

    def test_share_upload_window_payload(self):
        # A 24-sample three-axis window is 72 elements = 576 payload bytes.
        payload = b"".join(x.to_bytes(8, "little") for x in range(72))
        env = make_env(sender=0, msg_type="share_upload", round=0, payload=payload)
        data = frame(env)
        back = parse_frame(data)
        assert back.element_count == 72
        assert len(back.payload) == 576
        header = json.loads(data[4:])
        assert header["count"] == 72

    @settings(max_examples=200, deadline=None)
    @given(
        sender=st.integers(0, 10),
        msg_type=st.sampled_from(["share_upload", "mpc_round", "label_result",
                                  "ack", "error"]),
        rnd=st.integers(0, 10_000),
        seq=st.integers(0, 50),
        words=st.lists(st.integers(0, 2**64 - 1), max_size=64),
        sid=st.binary(min_size=16, max_size=16),
    )
    def test_roundtrip_property(self, sender, msg_type, rnd, seq, words, sid):
        payload = b"".join(w.to_bytes(8, "little") for w in words)
        env = Envelope(session_id=sid, sender=sender, msg_type=msg_type,
                       round=rnd, seq=seq, payload=payload,
                       meta={"op": "x", "n": 1})
        assert parse_frame(frame(env)) == env

    def test_rejects_short_frame(self):
        with pytest.raises(FrameError, match="short frame"):
            parse_frame(b"\x00\x01")

    def test_rejects_length_mismatch(self):
        data = frame(make_env())
        with pytest.raises(FrameError, match="length mismatch"):
            parse_frame(data[:-1])
        with pytest.raises(FrameError, match="length mismatch"):
            parse_frame(data + b"x")

    def test_rejects_oversized_declared_length(self):
        data = (MAX_FRAME_BYTES).to_bytes(4, "big") + b"{}"
        with pytest.raises(FrameError, match="1 MiB"):
            parse_frame(data)

    def test_rejects_oversized_payload_on_send(self):
        env = make_env(payload=b"\x00" * (MAX_FRAME_BYTES + 8))
        with pytest.raises(FrameError, match="1 MiB"):
            frame(env)

    def test_rejects_bad_json(self):
        body = b"{not json"
        data = len(body).to_bytes(4, "big") + body
        with pytest.raises(FrameError, match="not valid JSON"):
            parse_frame(data)

    def test_rejects_missing_field(self):
        header = json.loads(frame(make_env())[4:])
        del header["round"]
        body = json.dumps(header).encode()
        with pytest.raises(FrameError, match="'round'"):
            parse_frame(len(body).to_bytes(4, "big") + body)

    def test_rejects_bad_session_hex(self):
        header = json.loads(frame(make_env())[4:])
        header["session_id"] = "zz" * 16
        body = json.dumps(header).encode()
        with pytest.raises(FrameError, match="session_id"):
            parse_frame(len(body).to_bytes(4, "big") + body)

    def test_rejects_wrong_session_length(self):
        with pytest.raises(FrameError, match="16 bytes"):
            frame(make_env(session_id=b"\x00" * 8))

    def test_rejects_bad_base64(self):
        header = json.loads(frame(make_env())[4:])
        header["payload"] = "!!!"
        body = json.dumps(header).encode()
        with pytest.raises(FrameError, match="base64"):
            parse_frame(len(body).to_bytes(4, "big") + body)

    def test_rejects_count_mismatch(self):
        header = json.loads(frame(make_env())[4:])
        header["count"] = 999
        body = json.dumps(header).encode()
        with pytest.raises(FrameError, match="count mismatch"):
            parse_frame(len(body).to_bytes(4, "big") + body)

    def test_rejects_unknown_msg_type(self):
        with pytest.raises(FrameError, match="msg_type"):
            frame(make_env(msg_type="gossip"))

    def test_rejects_ragged_payload(self):
        with pytest.raises(FrameError, match="multiple of 8"):
            frame(make_env(payload=b"\x01" * 13))

    def test_rejects_unknown_version(self):
        with pytest.raises(FrameError, match="version"):
            frame(make_env(version=9))

    def test_transcript_hash_order_independent(self):
        envs = [make_env(round=i) for i in range(5)]
        h1 = transcript_hash(envs)
        h2 = transcript_hash(list(reversed(envs)))
        assert h1 == h2
        h3 = transcript_hash(envs[:-1])
        assert h1 != h3


class TestPeerConfig:
    def write(self, tmp_path, doc):
        path = tmp_path / "peers.json"
        path.write_text(json.dumps(doc))
        return str(path)

    def test_load_valid(self, tmp_path, monkeypatch):
        monkeypatch.delenv("FALLDET_PEERS", raising=False)
        path = self.write(tmp_path, {"parties": [
            {"id": 1, "host": "127.0.0.1", "port": 9001},
            {"id": 2, "host": "127.0.0.1", "port": 9002},
            {"id": 3, "host": "127.0.0.1", "port": 9003},
        ]})
        table = load_peer_config(path)
        assert sorted(table) == [1, 2, 3]
        assert table[2] == PeerEntry(2, "127.0.0.1", 9002, None)

    def test_env_override(self, tmp_path, monkeypatch):
        good = self.write(tmp_path, {"parties": [
            {"id": 1, "host": "a", "port": 1}]})
        monkeypatch.setenv("FALLDET_PEERS", good)
        table = load_peer_config("/nonexistent/peers.json")
        assert table[1].host == "a"

    def test_missing_file(self, monkeypatch):
        monkeypatch.delenv("FALLDET_PEERS", raising=False)
        with pytest.raises(ConfigError, match="not found"):
            load_peer_config("/nonexistent/peers.json")

    def test_no_path(self, monkeypatch):
        monkeypatch.delenv("FALLDET_PEERS", raising=False)
        with pytest.raises(ConfigError, match="FALLDET_PEERS"):
            load_peer_config(None)

    def test_bad_ids(self, tmp_path, monkeypatch):
        monkeypatch.delenv("FALLDET_PEERS", raising=False)
        path = self.write(tmp_path, {"parties": [
            {"id": 1, "host": "a", "port": 1},
            {"id": 3, "host": "a", "port": 2}]})
        with pytest.raises(ConfigError, match="1..n"):
            load_peer_config(path)

    def test_missing_port(self, tmp_path, monkeypatch):
        monkeypatch.delenv("FALLDET_PEERS", raising=False)
        path = self.write(tmp_path, {"parties": [{"id": 1, "host": "a"}]})
        with pytest.raises(ConfigError, match="entry 0"):
            load_peer_config(path)


class TestHub:
    def test_direct_delivery(self):
        hub = InMemoryHub()
        a, b = hub.endpoint(1), hub.endpoint(2)
        env = make_env()
        a.send(2, env)
        assert b.recv(timeout=1) == env

    def test_push_delivery(self):
        hub = InMemoryHub()
        a, b = hub.endpoint(1), hub.endpoint(2)
        got = []
        b.on_receive = got.append
        a.send(2, make_env())
        assert len(got) == 1

    def test_duplicate_node_id(self):
        hub = InMemoryHub()
        hub.endpoint(1)
        with pytest.raises(ConfigError, match="already registered"):
            hub.endpoint(1)

    def test_unknown_destination(self):
        hub = InMemoryHub()
        a = hub.endpoint(1)
        with pytest.raises(TransportError, match="no endpoint"):
            a.send(7, make_env())

    def test_recv_timeout(self):
        hub = InMemoryHub()
        a = hub.endpoint(1)
        with pytest.raises(TransportError, match="no message"):
            a.recv(timeout=0.05)

    def test_seeded_jitter_interleaves_streams_but_keeps_pair_order(self):
        hub = InMemoryHub(seed=99)
        a = hub.endpoint(1)
        b = hub.endpoint(2)
        c = hub.endpoint(3)
        n = 60
        # Two senders alternate bursts into one receiver.
        for i in range(n):
            a.send(3, make_env(sender=1, round=i))
            b.send(3, make_env(sender=2, round=i))
        got = [c.recv(timeout=5) for _ in range(2 * n)]
        hub.close()
        by_sender = {1: [], 2: []}
        for env in got:
            by_sender[env.sender].append(env.round)
        # Each directed stream arrives exactly in send order...
        assert by_sender[1] == list(range(n))
        assert by_sender[2] == list(range(n))
        # ...but the jitter genuinely perturbs how the streams interleave
        # relative to the strict submit alternation.
        arrival = [env.sender for env in got]
        assert arrival != [1, 2] * n

    def test_delay_holds_messages(self):
        hub = InMemoryHub(delay=0.15)
        a, b = hub.endpoint(1), hub.endpoint(2)
        t0 = time.monotonic()
        a.send(2, make_env())
        b.recv(timeout=2)
        assert time.monotonic() - t0 >= 0.14
        hub.close()

    def test_transcript_recording(self):
        hub = InMemoryHub(record=True)
        a, _ = hub.endpoint(1), hub.endpoint(2)
        a.send(2, make_env(round=1))
        a.send(2, make_env(round=2))
        assert [env.round for _, env in hub.transcript] == [1, 2]


class TestTcp:
    def test_loopback_roundtrip(self):
        got = []
        done = threading.Event()

        def on_msg(env):
            got.append(env)
            done.set()

        server = TcpNode(2, ("127.0.0.1", 0), {}, on_msg)
        peers = {2: PeerEntry(2, "127.0.0.1", server.listen_port)}
        client = TcpNode(1, None, peers, lambda e: None)
        env = make_env(payload=os.urandom(8 * 1000))
        client.send(2, env)
        assert done.wait(timeout=5)
        assert got[0] == env
        client.close()
        server.close()

    def test_many_frames_in_order_per_connection(self):
        got = []
        lock = threading.Lock()
        server = TcpNode(2, ("127.0.0.1", 0), {},
                         lambda e: (lock.acquire(), got.append(e.round),
                                    lock.release()))
        peers = {2: PeerEntry(2, "127.0.0.1", server.listen_port)}
        client = TcpNode(1, None, peers, lambda e: None)
        for i in range(50):
            client.send(2, make_env(round=i))
        deadline = time.monotonic() + 5
        while len(got) < 50 and time.monotonic() < deadline:
            time.sleep(0.01)
        assert got == list(range(50))
        client.close()
        server.close()

    def test_unreachable_peer(self):
        client = TcpNode(1, None, {2: PeerEntry(2, "127.0.0.1", 1)},
                         lambda e: None, dial_timeout=0.3)
        with pytest.raises(TransportError, match="cannot reach"):
            client.send(2, make_env())
        client.close()

    @pytest.mark.skipif(shutil.which("openssl") is None,
                        reason="openssl binary not available")
    def test_dev_tls_roundtrip(self, tmp_path):
        cert = tmp_path / "node.crt"
        key = tmp_path / "node.key"
        subprocess.run(
            ["openssl", "req", "-x509", "-newkey", "rsa:2048", "-nodes",
             "-keyout", str(key), "-out", str(cert), "-days", "1",
             "-subj", "/CN=localhost"],
            check=True, capture_output=True)
        got = []
        done = threading.Event()
        server = TcpNode(2, ("127.0.0.1", 0), {},
                         lambda e: (got.append(e), done.set()),
                         tls_cert=str(cert), tls_key=str(key))
        peers = {2: PeerEntry(2, "127.0.0.1", server.listen_port,
                              tls_cert=str(cert))}
        client = TcpNode(1, None, peers, lambda e: None)
        env = make_env()
        client.send(2, env)
        assert done.wait(timeout=5)
        assert got[0] == env
        client.close()
        server.close()


def test_read_frame_from_socket_matches_parse():
    import socket as socket_mod

    a, b = socket_mod.socketpair()
    env = make_env(payload=os.urandom(80))
    a.sendall(frame(env))
    assert read_frame_from_socket(b) == env
    a.close()
    b.close()
