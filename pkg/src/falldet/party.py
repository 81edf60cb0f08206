"""One cloud party: share storage, session orchestration, MPC execution.

A session covers one uploaded window batch. The device streams
share_upload envelopes (the last one flagged complete); the party
persists them, acknowledges, and signals readiness to its peers with a
hash of its own configuration. When every peer has signaled a matching
configuration the deterministic schedule runs and only the label is
opened and returned to the device.

Storage is an append-only newline-delimited JSON log. Recovery reads it
back on startup, tolerating a torn trailing write.
"""

from __future__ import annotations

import base64
import csv
import hashlib
import json
import os
import threading
from dataclasses import dataclass, field as dfield

import numpy as np

from . import pipeline
from .classifiers import ModelParams, export_model
from .engine import MODE_PRODUCTION, MpcEngine, SessionChannel
from .errors import ConfigError, ProtocolError
from .transport import SENDER_DEVICE, Envelope

AWAITING_DATA = "awaiting_data"
RUNNING = "running"
DONE = "done"
FAILED = "failed"
_STATUS_RANK = {AWAITING_DATA: 0, RUNNING: 1, DONE: 2, FAILED: 2}


class ShareStore:
    """Append-only NDJSON share log with torn-tail tolerant recovery."""

    def __init__(self, path):
        self.path = os.fspath(path)
        self.skipped = 0
        self._records = []
        self._lock = threading.Lock()
        if os.path.exists(self.path):
            self._recover()
        self._fh = open(self.path, "a", encoding="utf-8")

    def _recover(self):
        with open(self.path, "rb") as fh:
            data = fh.read()
        for line in data.split(b"\n"):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                rec["payload"] = base64.b64decode(rec["payload"], validate=True)
                bytes.fromhex(rec["session_id"])
                int(rec["seq"])
            except (ValueError, KeyError, TypeError):
                self.skipped += 1  # torn or corrupt write; keep the rest
                continue
            self._records.append(rec)

    def append(self, session_id: bytes, seq: int, payload: bytes, meta: dict):
        rec = {
            "session_id": session_id.hex(),
            "seq": int(seq),
            "payload": base64.b64encode(payload).decode("ascii"),
            "meta": meta,
        }
        line = json.dumps(rec, sort_keys=True)
        with self._lock:
            self._fh.write(line + "\n")
            self._fh.flush()
            os.fsync(self._fh.fileno())
            stored = dict(rec)
            stored["payload"] = payload
            self._records.append(stored)

    def records(self, session_id: bytes | None = None):
        with self._lock:
            if session_id is None:
                return list(self._records)
            sid = session_id.hex()
            return [r for r in self._records if r["session_id"] == sid]

    def close(self):
        with self._lock:
            self._fh.close()


@dataclass
class SessionState:
    session_id: bytes
    channel: SessionChannel
    status: str = AWAITING_DATA
    uploads: dict = dfield(default_factory=dict)  # seq -> payload bytes
    meta: dict | None = None  # from the complete upload
    ready_peers: set = dfield(default_factory=set)
    announced: bool = False
    result: list | None = None
    error: str | None = None

    def advance(self, new_status):
        if _STATUS_RANK[new_status] < _STATUS_RANK[self.status]:
            raise ProtocolError(
                f"illegal status transition {self.status} -> {new_status}"
            )
        self.status = new_status


class PartyService:
    """Message-driven state machine for one party.

    send_fn(dest, env) must reach peers (1..n) and the device (0).
    device_route_fn, when given, is called with the complete upload's
    meta before anything is sent back to the device; TCP deployments use
    it to learn the device's reply address.
    """

    def __init__(self, party_id, policy, field, codec, model: ModelParams,
                 window_len, store: ShareStore, send_fn, *,
                 mode=MODE_PRODUCTION, readiness_timeout=30.0,
                 session_timeout=120.0, timing_path=None,
                 device_route_fn=None):
        self.party = party_id
        self.policy = policy
        self.field = field
        self.codec = codec
        self.model = model
        self.window_len = window_len
        self.store = store
        self.send_fn = send_fn
        self.mode = mode
        self.readiness_timeout = readiness_timeout
        self.session_timeout = session_timeout
        self.timing_path = os.fspath(timing_path) if timing_path else None
        self.device_route_fn = device_route_fn
        self.peers = tuple(i for i in range(1, policy.n + 1) if i != party_id)
        self.config_hash = self._config_hash()
        self.sessions: dict[bytes, SessionState] = {}
        self._lock = threading.Lock()
        self._timers: dict[bytes, threading.Timer] = {}
        self._threads: list[threading.Thread] = []
        self._closed = False
        self._recover_sessions()

    def _config_hash(self):
        doc = {
            "model": export_model(self.model),
            "window_len": self.window_len,
            "parties": self.policy.n,
            "degree": self.policy.degree,
            "modulus": self.field.p,
            "frac_bits": self.codec.frac_bits,
        }
        blob = json.dumps(doc, sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()

    def _recover_sessions(self):
        for rec in self.store.records():
            sid = bytes.fromhex(rec["session_id"])
            st = self._session(sid)
            st.uploads[rec["seq"]] = rec["payload"]
            if rec.get("meta", {}).get("complete"):
                st.meta = rec["meta"]

    def _session(self, sid: bytes) -> SessionState:
        with self._lock:
            st = self.sessions.get(sid)
            if st is None:
                chan = SessionChannel(sid, self.party, self.peers,
                                      self.send_fn,
                                      timeout=self.session_timeout)
                st = SessionState(sid, chan)
                self.sessions[sid] = st
            return st

    # -- inbound dispatch ------------------------------------------------

    def on_message(self, env: Envelope):
        if env.msg_type == "share_upload" and env.sender == SENDER_DEVICE:
            self._handle_upload(env)
        elif env.msg_type == "ack" and env.meta.get("kind") == "ready":
            self._handle_ready(env)
        elif env.msg_type == "mpc_round":
            self._session(env.session_id).channel.deliver(env)
        elif env.msg_type == "error":
            self._fail(self._session(env.session_id),
                       env.meta.get("reason", f"peer {env.sender} error"),
                       notify_device=False)

    def _handle_upload(self, env: Envelope):
        st = self._session(env.session_id)
        if self.device_route_fn is not None and "reply_host" in env.meta:
            self.device_route_fn(env.meta)
        expected = 3 * int(env.meta.get("window_len", self.window_len))
        if env.element_count != expected or expected != 3 * self.window_len:
            self._reply(env.session_id, "error", meta={
                "reason": f"upload of {env.element_count} elements does not "
                          f"form windows of {self.window_len} samples",
            })
            return
        for key, have in (("features", self.model.feature_kind),
                          ("classifier", self.model.kind)):
            want = env.meta.get(key)
            if want and want != have:
                self._reply(env.session_id, "error", meta={
                    "reason": f"device expects {key}={want}, "
                              f"party {self.party} serves {have}",
                })
                return
        duplicate = env.seq in st.uploads
        if not duplicate:
            st.uploads[env.seq] = env.payload
            self.store.append(env.session_id, env.seq, env.payload,
                              dict(env.meta))
        self._reply(env.session_id, "ack", meta={"kind": "upload",
                                                 "seq": env.seq})
        if env.meta.get("complete"):
            # also fires on a duplicate resend: that is how a session
            # resumes after the party restarts from its share log
            if st.meta is None:
                st.meta = dict(env.meta)
            self._announce_ready(st)

    def _announce_ready(self, st: SessionState):
        with self._lock:
            if st.announced or self._closed:
                return
            st.announced = True
            timer = threading.Timer(self.readiness_timeout,
                                    self._readiness_expired, args=(st,))
            timer.daemon = True
            self._timers[st.session_id] = timer
            timer.start()
        for j in self.peers:
            self.send_fn(j, Envelope(
                session_id=st.session_id,
                sender=self.party,
                msg_type="ack",
                meta={"kind": "ready", "config": self.config_hash,
                      "windows": len(st.uploads)},
            ))
        self._maybe_start(st)

    def _handle_ready(self, env: Envelope):
        st = self._session(env.session_id)
        if env.meta.get("config") != self.config_hash:
            self._fail(st, f"configuration mismatch with party {env.sender}")
            return
        st.ready_peers.add(env.sender)
        self._maybe_start(st)

    def _readiness_expired(self, st: SessionState):
        if st.status == AWAITING_DATA:
            missing = sorted(set(self.peers) - st.ready_peers)
            self._fail(st, f"peers {missing} not ready within "
                           f"{self.readiness_timeout}s")

    def _maybe_start(self, st: SessionState):
        with self._lock:
            ready = (st.status == AWAITING_DATA and st.meta is not None
                     and st.announced
                     and set(self.peers) <= st.ready_peers)
            if not ready or self._closed:
                return
            st.advance(RUNNING)
            timer = self._timers.pop(st.session_id, None)
            t = threading.Thread(target=self._run, args=(st,), daemon=True)
            self._threads.append(t)
        if timer is not None:
            timer.cancel()
        t.start()

    # -- session execution -----------------------------------------------

    def _run(self, st: SessionState):
        try:
            shares = np.concatenate([
                self.field.from_bytes(st.uploads[seq])
                for seq in sorted(st.uploads)
            ])
            eng = MpcEngine(self.field, self.codec, self.policy, self.party,
                            st.channel, mode=self.mode)
            h = eng.load_input(shares, self.codec.frac_bits)
            res = pipeline.run_schedule(eng, h, self.window_len, self.model)
        except Exception as e:
            self._fail(st, f"session failed at party {self.party}: {e}")
            return
        labels = [int(v) for v in res.labels]
        st.result = labels
        st.advance(DONE)
        self._write_timing(st, res, labels[0])
        self._reply(st.session_id, "label_result",
                    payload=self.field.to_bytes(
                        np.asarray(labels, dtype=np.uint64)),
                    meta={"count": len(labels)})

    def _write_timing(self, st, res: pipeline.ScheduleResult, label):
        if self.timing_path is None:
            return
        new = not os.path.exists(self.timing_path)
        with open(self.timing_path, "a", newline="") as fh:
            w = csv.writer(fh)
            if new:
                w.writerow(["session_id", "fe_rounds", "in_rounds",
                            "fe_ms", "in_ms", "label"])
            w.writerow([st.session_id.hex(), res.fe_rounds, res.in_rounds,
                        f"{res.fe_ms:.3f}", f"{res.in_ms:.3f}", label])

    def _fail(self, st: SessionState, reason, notify_device=True):
        with self._lock:
            if st.status in (DONE, FAILED):
                return
            st.error = reason
            st.advance(FAILED)
            timer = self._timers.pop(st.session_id, None)
        if timer is not None:
            timer.cancel()
        st.channel.close()
        if notify_device:
            self._reply(st.session_id, "error", meta={"reason": reason})

    def _reply(self, sid: bytes, msg_type, payload=b"", meta=None):
        try:
            self.send_fn(SENDER_DEVICE, Envelope(
                session_id=sid, sender=self.party, msg_type=msg_type,
                payload=payload, meta=meta or {},
            ))
        except Exception:
            pass  # device gone; the session outcome is still recorded

    def close(self):
        with self._lock:
            self._closed = True
            timers = list(self._timers.values())
            self._timers.clear()
        for t in timers:
            t.cancel()
        for t in self._threads:
            t.join(timeout=5)
        self.store.close()
