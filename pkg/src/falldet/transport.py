"""Message transport: envelopes, wire framing, and delivery substrates.

Wire format: each message is a 4-byte big-endian frame length followed by
a JSON header; the element payload rides inside the header base64-encoded.
Payloads are arrays of 8-byte little-endian field elements, so the header's
``count`` must equal payload length / 8.  Frames are capped at 1 MiB.

Two substrates deliver frames: an in-process hub (default for tests and
the harness) and TCP sockets with optional TLS.  Delivery is at-least-once;
receivers deduplicate on (session_id, sender, msg_type, round, seq).
Both substrates keep per-(sender, dest) FIFO order; the hub can inject a
symmetric per-message delay with seeded jitter so concurrent streams
interleave reproducibly but not trivially.
"""

from __future__ import annotations

import base64
import hashlib
import heapq
import json
import os
import queue
import random
import socket
import ssl
import threading
import time
from dataclasses import dataclass, field as dfield

from .errors import ConfigError, FrameError, TransportError

PROTOCOL_VERSION = 1
MAX_FRAME_BYTES = 1 << 20
SENDER_DEVICE = 0

MSG_TYPES = ("share_upload", "mpc_round", "label_result", "ack", "error")

PEER_CONFIG_ENV = "FALLDET_PEERS"


@dataclass
class Envelope:
    session_id: bytes
    sender: int
    msg_type: str
    round: int = 0
    seq: int = 0
    payload: bytes = b""
    meta: dict = dfield(default_factory=dict)
    version: int = PROTOCOL_VERSION

    def key(self):
        """Uniqueness/dedup identity."""
        return (self.session_id, self.sender, self.msg_type, self.round, self.seq)

    @property
    def element_count(self) -> int:
        return len(self.payload) // 8


def _validate(env: Envelope):
    if env.version != PROTOCOL_VERSION:
        raise FrameError(f"unsupported protocol version {env.version}")
    if len(env.session_id) != 16:
        raise FrameError(f"session_id must be 16 bytes, got {len(env.session_id)}")
    if env.msg_type not in MSG_TYPES:
        raise FrameError(f"unknown msg_type {env.msg_type!r}")
    if env.sender < 0:
        raise FrameError(f"negative sender id {env.sender}")
    if env.round < 0 or env.seq < 0:
        raise FrameError("round and seq must be non-negative")
    if len(env.payload) % 8 != 0:
        raise FrameError(
            f"payload length {len(env.payload)} is not a multiple of 8"
        )


def frame(env: Envelope) -> bytes:
    """Serialize to the wire: 4-byte length prefix + JSON header."""
    _validate(env)
    header = {
        "version": env.version,
        "session_id": env.session_id.hex(),
        "sender": env.sender,
        "msg_type": env.msg_type,
        "round": env.round,
        "seq": env.seq,
        "count": env.element_count,
        "meta": env.meta,
        "payload": base64.b64encode(env.payload).decode("ascii"),
    }
    body = json.dumps(header, separators=(",", ":"), sort_keys=True).encode()
    if 4 + len(body) > MAX_FRAME_BYTES:
        raise FrameError(f"frame of {4 + len(body)} bytes exceeds 1 MiB cap")
    return len(body).to_bytes(4, "big") + body


def parse_frame(data: bytes) -> Envelope:
    """Strict inverse of frame(); offsets and field names appear in errors."""
    if len(data) < 4:
        raise FrameError(f"short frame: {len(data)} bytes, need 4-byte length")
    length = int.from_bytes(data[:4], "big")
    if length > MAX_FRAME_BYTES - 4:
        raise FrameError(f"declared frame length {length} exceeds 1 MiB cap")
    if len(data) != 4 + length:
        raise FrameError(
            f"frame length mismatch: declared {length}, have {len(data) - 4}"
        )
    try:
        header = json.loads(data[4:])
    except json.JSONDecodeError as e:
        raise FrameError(f"header is not valid JSON at offset {e.pos}") from None
    if not isinstance(header, dict):
        raise FrameError("header must be a JSON object")
    for name in ("version", "session_id", "sender", "msg_type",
                 "round", "seq", "count", "payload"):
        if name not in header:
            raise FrameError(f"header missing field {name!r}")
    try:
        session_id = bytes.fromhex(header["session_id"])
    except (TypeError, ValueError):
        raise FrameError("header field 'session_id' is not hex") from None
    try:
        payload = base64.b64decode(header["payload"], validate=True)
    except Exception:
        raise FrameError("header field 'payload' is not valid base64") from None
    meta = header.get("meta") or {}
    if not isinstance(meta, dict):
        raise FrameError("header field 'meta' must be an object")
    env = Envelope(
        session_id=session_id,
        sender=int(header["sender"]),
        msg_type=str(header["msg_type"]),
        round=int(header["round"]),
        seq=int(header["seq"]),
        payload=payload,
        meta=meta,
        version=int(header["version"]),
    )
    _validate(env)
    if env.element_count != int(header["count"]):
        raise FrameError(
            f"element count mismatch: declared {header['count']}, "
            f"payload holds {env.element_count}"
        )
    return env


def transcript_hash(envelopes) -> str:
    """Order-independent digest: frames sorted by canonical key."""
    frames = sorted(frame(e) for e in envelopes)
    h = hashlib.sha256()
    for f in frames:
        h.update(f)
    return h.hexdigest()


# -- peer configuration -------------------------------------------------


@dataclass(frozen=True)
class PeerEntry:
    id: int
    host: str
    port: int
    tls_cert: str | None = None


def load_peer_config(path: str | None) -> dict[int, PeerEntry]:
    """Read the party table; FALLDET_PEERS overrides the path argument."""
    path = os.environ.get(PEER_CONFIG_ENV, path)
    if not path:
        raise ConfigError("no peer config: pass a path or set FALLDET_PEERS")
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"peer config not found: {path}") from None
    except json.JSONDecodeError as e:
        raise ConfigError(f"peer config {path} is not valid JSON: {e}") from None
    parties = doc.get("parties")
    if not isinstance(parties, list) or not parties:
        raise ConfigError(f"peer config {path} needs a non-empty 'parties' list")
    table = {}
    for i, entry in enumerate(parties):
        try:
            pid = int(entry["id"])
            table[pid] = PeerEntry(pid, str(entry["host"]), int(entry["port"]),
                                   entry.get("tls_cert"))
        except (KeyError, TypeError, ValueError) as e:
            raise ConfigError(f"peer config entry {i} invalid: {e}") from None
    if sorted(table) != list(range(1, len(table) + 1)):
        raise ConfigError(f"party ids must be 1..n, got {sorted(table)}")
    return table


# -- in-memory hub ------------------------------------------------------


class Endpoint:
    """One node's handle on the hub: send to anyone, recv from an inbox.

    Setting ``on_receive`` switches to push delivery: incoming envelopes
    are handed to the callback (on the sender or pump thread) instead of
    being queued.
    """

    def __init__(self, hub, node_id: int):
        self._hub = hub
        self.node_id = node_id
        self.inbox: queue.Queue = queue.Queue()
        self.on_receive = None

    def send(self, dest: int, env: Envelope):
        self._hub._submit(self.node_id, dest, env)

    def _push(self, env: Envelope):
        cb = self.on_receive
        if cb is not None:
            cb(env)
        else:
            self.inbox.put(env)

    def recv(self, timeout: float | None = None) -> Envelope:
        try:
            return self.inbox.get(timeout=timeout)
        except queue.Empty:
            raise TransportError(
                f"node {self.node_id}: no message within {timeout}s"
            ) from None


class InMemoryHub:
    """In-process delivery substrate.

    With no seed and no delay, messages go straight to the destination
    inbox.  A delay holds every message for ``delay`` seconds before
    release.  A seed additionally jitters each release time by a seeded
    random amount (a quarter of the delay, or a few milliseconds when
    the delay is zero), so concurrent streams genuinely interleave
    differently run to run.  Release times are kept monotone per
    (sender, dest) pair, so each directed stream still arrives in send
    order, matching what a real per-peer connection guarantees.
    """

    def __init__(self, seed: int | None = None, delay: float = 0.0,
                 record: bool = False):
        self._endpoints: dict[int, Endpoint] = {}
        self._record = record
        self.transcript: list[tuple[int, Envelope]] = []
        self._lock = threading.Lock()
        self._delay = delay
        self._jitter = 0.0
        self._scheduled = seed is not None or delay > 0
        if self._scheduled:
            self._rng = random.Random(seed)
            if seed is not None:
                self._jitter = delay * 0.25 if delay > 0 else 0.003
            self._cv = threading.Condition()
            self._heap: list = []
            self._ticket = 0
            self._pair_ready: dict[tuple[int, int], float] = {}
            self._stopped = False
            self._pump = threading.Thread(target=self._run_pump, daemon=True)
            self._pump.start()

    def endpoint(self, node_id: int) -> Endpoint:
        with self._lock:
            if node_id in self._endpoints:
                raise ConfigError(f"node id {node_id} already registered")
            ep = Endpoint(self, node_id)
            self._endpoints[node_id] = ep
            return ep

    def _submit(self, sender: int, dest: int, env: Envelope):
        if self._record:
            with self._lock:
                self.transcript.append((dest, env))
        if not self._scheduled:
            self._deliver(dest, env)
            return
        with self._cv:
            self._ticket += 1
            ready = time.monotonic() + self._delay
            if self._jitter:
                ready += self._rng.random() * self._jitter
            # FIFO per directed pair: never release before an earlier
            # message on the same (sender, dest) stream.
            pair = (sender, dest)
            ready = max(ready, self._pair_ready.get(pair, 0.0))
            self._pair_ready[pair] = ready
            heapq.heappush(self._heap, (ready, self._ticket, dest, env))
            self._cv.notify()

    def _deliver(self, dest: int, env: Envelope):
        ep = self._endpoints.get(dest)
        if ep is None:
            raise TransportError(f"no endpoint registered for node {dest}")
        ep._push(env)

    def _run_pump(self):
        while True:
            with self._cv:
                while not self._heap and not self._stopped:
                    self._cv.wait()
                if self._stopped and not self._heap:
                    return
                ready = self._heap[0][0]
                now = time.monotonic()
                if ready > now:
                    self._cv.wait(ready - now)
                    continue
                _, _, dest, env = heapq.heappop(self._heap)
            self._deliver(dest, env)

    def close(self):
        if self._scheduled:
            with self._cv:
                self._stopped = True
                self._cv.notify()
            self._pump.join(timeout=5)


# -- TCP substrate ------------------------------------------------------


def _recv_exact(sock, n: int) -> bytes:
    buf = b""
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            raise TransportError("connection closed mid-frame")
        buf += chunk
    return buf


def read_frame_from_socket(sock) -> Envelope:
    head = _recv_exact(sock, 4)
    length = int.from_bytes(head, "big")
    if length > MAX_FRAME_BYTES - 4:
        raise FrameError(f"declared frame length {length} exceeds 1 MiB cap")
    body = _recv_exact(sock, length)
    return parse_frame(head + body)


class TcpNode:
    """Socket transport for one node (party or device).

    The node listens for inbound frames and dials its own outbound
    connection to each destination on first send (with bounded retry).
    Inbound connections only receive; outbound connections only send -
    every pair of nodes talks over two sockets, which avoids dial races.
    """

    def __init__(self, node_id: int, listen: tuple[str, int] | None,
                 peers: dict[int, PeerEntry], on_message,
                 tls_cert: str | None = None, tls_key: str | None = None,
                 dial_timeout: float = 10.0):
        self.node_id = node_id
        self.peers = peers
        self.on_message = on_message
        self.dial_timeout = dial_timeout
        self._out: dict[int, socket.socket] = {}
        self._out_lock = threading.Lock()
        self._send_locks: dict[int, threading.Lock] = {}
        self._listener = None
        self._ssl_server = None
        self._ssl_client = None
        self._closed = False
        self._threads = []
        if tls_cert:
            ctx = ssl.SSLContext(ssl.PROTOCOL_TLS_SERVER)
            ctx.load_cert_chain(tls_cert, tls_key)
            self._ssl_server = ctx
        if any(p.tls_cert for p in peers.values()):
            ctx = ssl.SSLContext(ssl.PROTOCOL_TLS_CLIENT)
            ctx.check_hostname = False
            ctx.verify_mode = ssl.CERT_NONE  # dev TLS: encryption only
            self._ssl_client = ctx
        if listen is not None:
            srv = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
            srv.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
            srv.bind(listen)
            srv.listen(16)
            self._listener = srv
            t = threading.Thread(target=self._accept_loop, daemon=True)
            t.start()
            self._threads.append(t)

    @property
    def listen_port(self) -> int:
        return self._listener.getsockname()[1]

    def _accept_loop(self):
        while not self._closed:
            try:
                conn, _ = self._listener.accept()
            except OSError:
                return
            if self._ssl_server is not None:
                try:
                    conn = self._ssl_server.wrap_socket(conn, server_side=True)
                except ssl.SSLError:
                    conn.close()
                    continue
            conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            t = threading.Thread(target=self._reader_loop, args=(conn,), daemon=True)
            t.start()
            self._threads.append(t)

    def _reader_loop(self, conn):
        try:
            while not self._closed:
                env = read_frame_from_socket(conn)
                self.on_message(env)
        except (TransportError, FrameError, OSError):
            conn.close()

    def _dial(self, dest: int) -> socket.socket:
        entry = self.peers.get(dest)
        if entry is None:
            raise TransportError(f"no peer entry for node {dest}")
        deadline = time.monotonic() + self.dial_timeout
        delay = 0.05
        while True:
            try:
                sock = socket.create_connection((entry.host, entry.port), timeout=5)
                if entry.tls_cert and self._ssl_client is not None:
                    sock = self._ssl_client.wrap_socket(sock, server_hostname=entry.host)
                sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
                return sock
            except OSError as e:
                if time.monotonic() > deadline:
                    raise TransportError(
                        f"cannot reach node {dest} at {entry.host}:{entry.port}: {e}"
                    ) from None
                time.sleep(delay)
                delay = min(delay * 2, 0.5)

    def send(self, dest: int, env: Envelope):
        data = frame(env)
        with self._out_lock:
            lock = self._send_locks.setdefault(dest, threading.Lock())
        with lock:
            sock = self._out.get(dest)
            if sock is None:
                sock = self._dial(dest)
                self._out[dest] = sock
            try:
                sock.sendall(data)
            except OSError as e:
                self._out.pop(dest, None)
                sock.close()
                raise TransportError(f"send to node {dest} failed: {e}") from None

    def close(self):
        self._closed = True
        if self._listener is not None:
            try:
                self._listener.close()
            except OSError:
                pass
        for sock in self._out.values():
            try:
                sock.close()
            except OSError:
                pass
