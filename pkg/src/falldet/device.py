"""Source-device side: CSV ingest, windowing, sharing, upload.

The device never learns anything but its own data and the returned
label. Every accelerometer component of every sample is independently
secret-shared; party j receives only column j of the resulting share
matrix, so no single party can reconstruct any component.
"""

from __future__ import annotations

import csv
import math
import secrets
import threading
import time
from dataclasses import dataclass

import numpy as np

from .errors import IngestError, MalformedInputError, TransportError
from .field import FixedPointCodec, PrimeField
from .shamir import SharingPolicy, reconstruct_vec, share_vec
from .transport import SENDER_DEVICE, Envelope

REQUIRED_COLUMNS = ("timestamp", "ax", "ay", "az")


@dataclass(frozen=True)
class ImuRecord:
    timestamp: float
    ax: float
    ay: float
    az: float
    label: int | None = None

    @property
    def xyz(self):
        return (self.ax, self.ay, self.az)


@dataclass(frozen=True)
class Window:
    samples: np.ndarray  # (window_len, 3) float
    label: int | None  # 1 if any member sample is fall-labeled

    @property
    def length(self):
        return int(self.samples.shape[0])


def read_csv(path):
    """Yield validated ImuRecords; errors carry 1-based line numbers."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise IngestError(f"{path}: empty file, no header") from None
        cols = [c.strip().lower() for c in header]
        for name in REQUIRED_COLUMNS:
            if name not in cols:
                raise IngestError(f"{path}: header missing column {name!r}")
        idx = {name: cols.index(name) for name in cols}
        has_label = "label" in idx
        width = len(cols)
        for line_no, row in enumerate(reader, start=2):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue  # blank trailing lines are common in exports
            if len(row) != width:
                raise IngestError(
                    f"line {line_no}: expected {width} fields, got {len(row)}"
                )
            vals = {}
            for name in REQUIRED_COLUMNS:
                text = row[idx[name]].strip()
                try:
                    v = float(text)
                except ValueError:
                    raise IngestError(
                        f"line {line_no}: column {name!r} is not a number: {text!r}"
                    ) from None
                if not math.isfinite(v):
                    raise IngestError(
                        f"line {line_no}: column {name!r} is not finite: {text!r}"
                    )
                vals[name] = v
            label = None
            if has_label:
                text = row[idx["label"]].strip()
                if text not in ("0", "1"):
                    raise IngestError(
                        f"line {line_no}: column 'label' must be 0 or 1, got {text!r}"
                    )
                label = int(text)
            yield ImuRecord(vals["timestamp"], vals["ax"], vals["ay"],
                            vals["az"], label)


def make_windows(records, window_len, stride=None):
    """Fixed-length windows; a trailing partial window is dropped.

    The window ground-truth label is 1 if any member record is labeled 1
    (a fall anywhere in the window makes it a fall window), 0 if members
    are labeled all-zero, None if the corpus carries no labels.
    """
    if window_len < 3:
        raise MalformedInputError(f"window length {window_len} below minimum 3")
    stride = window_len if stride is None else stride
    if stride < 1:
        raise MalformedInputError(f"stride must be positive, got {stride}")
    records = list(records)
    out = []
    for start in range(0, len(records) - window_len + 1, stride):
        chunk = records[start:start + window_len]
        labels = [r.label for r in chunk if r.label is not None]
        label = None if not labels else int(any(labels))
        samples = np.array([r.xyz for r in chunk], dtype=np.float64)
        out.append(Window(samples, label))
    return out


@dataclass(frozen=True)
class ShareMatrix:
    """Fresh sharing of one window: column j goes to party j (1-based)."""

    columns: np.ndarray  # (n, window_len*3) uint64, sample-major x,y,z
    window_len: int

    def column(self, party_index):
        return self.columns[party_index - 1]


def share_window(window: Window, policy: SharingPolicy, field: PrimeField,
                 codec: FixedPointCodec, rng=None) -> ShareMatrix:
    raw = codec.encode_vec(window.samples.reshape(-1))
    rows = share_vec(field.arr(raw), policy, field, rng=rng)
    return ShareMatrix(np.stack(rows), window.length)


def reconstruct_window(m: ShareMatrix, indices, policy, field, codec) -> np.ndarray:
    """Debug check: rebuild the plaintext window from >= d+1 columns."""
    rows = [(i, m.column(i)) for i in indices]
    raw = reconstruct_vec(rows, policy, field)
    return codec.decode_vec(raw).reshape(m.window_len, 3)


class DeviceClient:
    """Uploads one shared window per session and waits for the label.

    send_fn(dest, env) must deliver to party `dest`; inbound envelopes
    (acks, label results, errors) are fed to deliver() by the transport.
    """

    def __init__(self, policy, field, codec, send_fn, parties=None,
                 timeout=30.0, rng=None, meta=None):
        self.policy = policy
        self.field = field
        self.codec = codec
        self.send_fn = send_fn
        self.parties = tuple(parties or range(1, policy.n + 1))
        self.timeout = timeout
        self.rng = rng
        self.meta = dict(meta or {})
        self._waiters = {}
        self._lock = threading.Lock()
        self.timings = []  # per session: dict of share/upload/total ms

    def deliver(self, env: Envelope):
        with self._lock:
            waiter = self._waiters.get(env.session_id)
        if waiter is not None:
            waiter.feed(env)

    def classify_window(self, window: Window, session_id=None):
        """Share, upload, await all acks, then the label. Returns
        (label, session_id)."""
        session_id = session_id or secrets.token_bytes(16)
        t0 = time.perf_counter()
        matrix = share_window(window, self.policy, self.field, self.codec,
                              rng=self.rng)
        t1 = time.perf_counter()
        waiter = _SessionWaiter(self.parties)
        with self._lock:
            self._waiters[session_id] = waiter
        try:
            meta = dict(self.meta)
            meta.update(window_len=window.length, complete=True)
            for j in self.parties:
                env = Envelope(
                    session_id=session_id,
                    sender=SENDER_DEVICE,
                    msg_type="share_upload",
                    payload=self.field.to_bytes(matrix.column(j)),
                    meta=meta,
                )
                self.send_fn(j, env)
            waiter.wait_acks(self.timeout)
            t2 = time.perf_counter()
            label = waiter.wait_label(self.timeout)
            t3 = time.perf_counter()
        finally:
            with self._lock:
                self._waiters.pop(session_id, None)
        self.timings.append({
            "session_id": session_id.hex(),
            "share_ms": (t1 - t0) * 1e3,
            "upload_ms": (t2 - t1) * 1e3,
            "total_ms": (t3 - t0) * 1e3,
            "label": label,
        })
        return label, session_id


class _SessionWaiter:
    def __init__(self, parties):
        self._cv = threading.Condition()
        self._need_acks = set(parties)
        self._label = None
        self._error = None

    def feed(self, env: Envelope):
        with self._cv:
            if env.msg_type == "ack":
                self._need_acks.discard(env.sender)
            elif env.msg_type == "label_result":
                vals = np.frombuffer(env.payload, dtype="<u8")
                self._label = int(vals[0]) if vals.size else None
            elif env.msg_type == "error":
                self._error = env.meta.get("reason", "party reported an error")
            self._cv.notify_all()

    def wait_acks(self, timeout):
        deadline = time.monotonic() + timeout
        with self._cv:
            while self._need_acks:
                if self._error:
                    raise TransportError(f"session aborted: {self._error}")
                left = deadline - time.monotonic()
                if left <= 0:
                    raise TransportError(
                        f"no ack from parties {sorted(self._need_acks)} "
                        f"within {timeout}s"
                    )
                self._cv.wait(min(left, 0.5))

    def wait_label(self, timeout):
        deadline = time.monotonic() + timeout
        with self._cv:
            while self._label is None:
                if self._error:
                    raise TransportError(f"session aborted: {self._error}")
                left = deadline - time.monotonic()
                if left <= 0:
                    raise TransportError(f"no label within {timeout}s")
                self._cv.wait(min(left, 0.5))
            return self._label
