"""Local orchestration: synthetic corpora, end-to-end runs, metrics.

Everything here runs on one machine. The memory mode wires three engine
threads over the in-process hub and classifies the whole corpus as one
batched session; the tcp mode spawns three real party processes on
localhost and drives them through the device client, one session per
window. Reports carry confusion-count metrics, MPC-vs-oracle agreement,
and per-phase round/latency numbers.
"""

from __future__ import annotations

import csv
import gc
import json
import os
import socket
import subprocess
import sys
import tempfile
import threading
import time
from dataclasses import dataclass

import numpy as np

from . import pipeline
from .classifiers import ModelParams, export_model, oracle_margin
from .device import DeviceClient, Window, make_windows, read_csv
from .engine import MODE_PRODUCTION, make_local_session
from .errors import ConfigError, FalldetError, MalformedInputError
from .features import DEFAULT_RATE_HZ, DEFAULT_WINDOW, oracle_features_batch
from .field import MERSENNE61, FixedPointCodec, PrimeField
from .shamir import SharingPolicy, share_vec
from .transport import InMemoryHub, PeerEntry, TcpNode

FIELD = PrimeField(MERSENNE61)
CODEC = FixedPointCodec(FIELD)
POLICY = SharingPolicy(n=3, degree=1)


# -- synthetic corpus ---------------------------------------------------

def _unit(rng):
    v = rng.normal(size=3)
    return v / np.linalg.norm(v)


def _gravity(rng, length):
    """Roughly vertical base orientation with a slow wobble."""
    tilt = rng.normal(0.0, 0.12, 2)
    g = np.array([np.sin(tilt[0]), np.sin(tilt[1]), 1.0])
    g /= np.linalg.norm(g)
    wobble = rng.normal(0.0, 0.02, (length, 3))
    return g[None, :] + wobble


def _adl_window(rng, length, rate_hz):
    t = np.arange(length) / rate_hz
    s = _gravity(rng, length)
    kind = rng.integers(3)
    if kind == 0:  # sitting still
        s += rng.normal(0.0, 0.04, (length, 3))
    elif kind == 1:  # walking: periodic vertical bounce + lateral sway
        freq = rng.uniform(1.4, 2.4)
        amp = rng.uniform(0.2, 0.8)
        phase = rng.uniform(0, 2 * np.pi)
        s[:, 2] += amp * np.sin(2 * np.pi * freq * t + phase)
        s[:, 0] += 0.5 * amp * np.sin(2 * np.pi * freq * t + phase + 1.3)
        s += rng.normal(0.0, 0.08, (length, 3))
    else:  # reaching / posture transition: one slow half-sine
        axis = rng.integers(3)
        amp = rng.uniform(0.3, 1.0) * rng.choice((-1.0, 1.0))
        s[:, axis] += amp * np.sin(np.pi * t / t[-1])
        s += rng.normal(0.0, 0.05, (length, 3))
    return s


def _fall_window(rng, length, rate_hz):
    """Free-fall dip, impact spike, ringing, then stillness."""
    s = _gravity(rng, length)
    s += rng.normal(0.0, 0.04, (length, 3))
    impact = int(rng.integers(length // 3, length - 4))
    drop = int(rng.integers(2, 6))
    lo = max(0, impact - drop)
    s[lo:impact] *= rng.uniform(0.05, 0.35)  # near weightless
    direction = _unit(rng)
    peak = rng.uniform(3.5, 7.5)
    s[impact] = peak * direction
    s[impact + 1] = -0.45 * peak * direction + rng.normal(0.0, 0.2, 3)
    ring = min(4, length - impact - 2)
    decay = 0.8 * peak * 0.45 ** np.arange(1, ring + 1)
    s[impact + 2:impact + 2 + ring] += (
        decay[:, None] * direction[None, :]
        * ((-1.0) ** np.arange(ring))[:, None]
    )
    return s


def gen_corpus(count, window_len=DEFAULT_WINDOW, seed=0, fall_fraction=0.5,
               rate_hz=DEFAULT_RATE_HZ):
    """Seeded synthetic corpus of labelled windows, values within +-8 g."""
    rng = np.random.default_rng(seed)
    n_falls = int(round(count * fall_fraction))
    windows = []
    for i in range(count):
        fall = i < n_falls
        make = _fall_window if fall else _adl_window
        samples = np.clip(make(rng, window_len, rate_hz), -8.0, 8.0)
        windows.append(Window(samples, int(fall)))
    order = rng.permutation(count)
    return [windows[i] for i in order]


def corpus_to_csv(windows, path, rate_hz=DEFAULT_RATE_HZ):
    """Flatten windows to the device CSV format, window label on each row."""
    labelled = all(w.label is not None for w in windows)
    dt = 1.0 / rate_hz
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["timestamp", "ax", "ay", "az"]
                   + (["label"] if labelled else []))
        k = 0
        for win in windows:
            for row in win.samples:
                cells = [f"{k * dt:.3f}"] + [f"{v:.6f}" for v in row]
                if labelled:
                    cells.append(win.label)
                w.writerow(cells)
                k += 1
    return path


def load_csv_corpus(path, window_len=DEFAULT_WINDOW, stride=None):
    return make_windows(read_csv(path), window_len, stride=stride)


# -- metrics ------------------------------------------------------------

def confusion(truth, predicted):
    truth = np.asarray(truth, dtype=np.int64)
    predicted = np.asarray(predicted, dtype=np.int64)
    tp = int(np.sum((truth == 1) & (predicted == 1)))
    fp = int(np.sum((truth == 0) & (predicted == 1)))
    tn = int(np.sum((truth == 0) & (predicted == 0)))
    fn = int(np.sum((truth == 1) & (predicted == 0)))
    return tp, fp, tn, fn


@dataclass(frozen=True)
class MetricsReport:
    """Classification quality and cost of one pipeline run.

    The ratio metrics are always recomputed from the confusion counts,
    never stored, so the identities hold exactly by construction.
    """

    tp: int
    fp: int
    tn: int
    fn: int
    agreement: float  # MPC label == oracle label rate
    mismatch_margins: tuple  # |oracle margin| at each disagreement
    windows: int
    fe_rounds: int
    in_rounds: int
    open_rounds: int
    fe_ms: float
    in_ms: float
    wall_ms: float
    incomplete: bool = False
    note: str = ""

    @property
    def total(self):
        return self.tp + self.fp + self.tn + self.fn

    @property
    def accuracy(self):
        return (self.tp + self.tn) / self.total if self.total else 0.0

    @property
    def precision(self):
        d = self.tp + self.fp
        return self.tp / d if d else 0.0

    @property
    def recall(self):
        d = self.tp + self.fn
        return self.tp / d if d else 0.0

    @property
    def f1(self):
        p, r = self.precision, self.recall
        return 2 * p * r / (p + r) if p + r else 0.0

    CSV_FIELDS = ("windows", "tp", "fp", "tn", "fn", "accuracy", "precision",
                  "recall", "f1", "agreement", "fe_rounds", "in_rounds",
                  "open_rounds", "fe_ms", "in_ms", "wall_ms", "incomplete")

    def as_csv_row(self):
        return [self.windows, self.tp, self.fp, self.tn, self.fn,
                f"{self.accuracy:.4f}", f"{self.precision:.4f}",
                f"{self.recall:.4f}", f"{self.f1:.4f}",
                f"{self.agreement:.4f}", self.fe_rounds, self.in_rounds,
                self.open_rounds, f"{self.fe_ms:.2f}", f"{self.in_ms:.2f}",
                f"{self.wall_ms:.2f}", int(self.incomplete)]

    def as_text(self):
        lines = [
            f"windows            {self.windows}",
            f"confusion          tp={self.tp} fp={self.fp} tn={self.tn} fn={self.fn}",
            f"accuracy           {self.accuracy:.3f}",
            f"precision          {self.precision:.3f}",
            f"recall             {self.recall:.3f}",
            f"f1                 {self.f1:.3f}",
            f"oracle agreement   {self.agreement:.4f}",
            f"rounds             fe={self.fe_rounds} inference={self.in_rounds} "
            f"open={self.open_rounds}",
            f"time (party 1)     fe={self.fe_ms:.1f}ms inference={self.in_ms:.1f}ms",
            f"wall clock         {self.wall_ms:.1f}ms",
        ]
        if self.incomplete:
            lines.append(f"INCOMPLETE         {self.note}")
        return "\n".join(lines)


# -- in-memory pipeline -------------------------------------------------

def _batched_session(windows, model: ModelParams, seed=0, delay=0.0,
                     hub_seed=None, shared_weights=False):
    """All windows through one engine session; returns (labels, result,
    wall_ms) where result is party 1's per-phase accounting."""
    window_len = windows[0].length
    flat = np.stack([w.samples for w in windows]).reshape(-1)
    rng = np.random.default_rng(seed)
    rows = share_vec(FIELD.arr(CODEC.encode_vec(flat)), POLICY, FIELD, rng=rng)
    hub = InMemoryHub(seed=hub_seed, delay=delay)
    engines, _ = make_local_session(FIELD, CODEC, POLICY, hub,
                                    mode=MODE_PRODUCTION, seed=seed)
    results, errors = {}, {}

    def run(i):
        try:
            eng = engines[i]
            h = eng.load_input(rows[i - 1], CODEC.frac_bits)
            results[i] = pipeline.run_schedule(eng, h, window_len, model,
                                               shared_weights=shared_weights)
        except Exception as e:  # surfaced after join
            errors[i] = e

    t0 = time.perf_counter()
    threads = [threading.Thread(target=run, args=(i,)) for i in engines]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    wall_ms = (time.perf_counter() - t0) * 1e3
    hub.close()
    if errors:
        raise errors[min(errors)]
    first = results[min(results)]
    for i, res in results.items():
        if not np.array_equal(res.labels, first.labels):
            raise ConfigError(f"party {i} disagrees on opened labels")
    return first.labels, first, wall_ms


def run_pipeline(windows, model: ModelParams, mode="memory", seed=0,
                 delay=0.0, hub_seed=None, work_dir=None) -> MetricsReport:
    """Classify a labelled corpus and score the result.

    mode "memory" runs one batched in-process session; "tcp" spawns
    three localhost party processes and classifies one window per
    session through the device client.
    """
    if not windows:
        raise MalformedInputError("empty corpus")
    if any(w.label is None for w in windows):
        raise MalformedInputError("corpus must carry ground-truth labels")
    truth = np.array([w.label for w in windows], dtype=np.int64)
    X = np.stack([w.samples for w in windows])
    feats = oracle_features_batch(X, model.feature_kind)
    margins = oracle_margin(feats, model)
    oracle_labels = (margins >= 0).astype(np.int64)

    failure = None
    labels = np.zeros(len(windows), dtype=np.int64)
    fe_rounds = in_rounds = open_rounds = 0
    fe_ms = in_ms = wall_ms = 0.0
    try:
        if mode == "memory":
            labels, res, wall_ms = _batched_session(
                windows, model, seed=seed, delay=delay, hub_seed=hub_seed)
            fe_rounds, in_rounds = res.fe_rounds, res.in_rounds
            open_rounds = res.open_rounds
            fe_ms, in_ms = res.fe_ms, res.in_ms
        elif mode == "tcp":
            labels, fe_ms, in_ms, wall_ms = _tcp_run(windows, model, work_dir)
            fe_rounds = pipeline.features.feature_rounds(
                model.feature_kind, windows[0].length)
            in_rounds = pipeline.classifiers.inference_rounds(model.kind)
            open_rounds = 1
        else:
            raise ConfigError(f"unknown transport mode {mode!r}")
    except FalldetError as e:
        failure = str(e)

    if failure is not None:
        return MetricsReport(0, 0, 0, 0, 0.0, (), len(windows),
                             0, 0, 0, 0.0, 0.0, 0.0,
                             incomplete=True, note=failure)
    tp, fp, tn, fn = confusion(truth, labels)
    agree = labels == oracle_labels
    mism = tuple(float(abs(m)) for m in margins[~agree])
    return MetricsReport(tp, fp, tn, fn, float(np.mean(agree)), mism,
                         len(windows), fe_rounds, in_rounds, open_rounds,
                         fe_ms, in_ms, wall_ms)


def run_matrix(windows, models, seed=0) -> dict:
    """Score one corpus under several models in a single batched session.

    Models sharing a feature kind reuse one feature extraction, so the
    full six-pair sweep costs one smartfall FE and one derivative FE
    instead of three of each. Returns {(kind, feature_kind):
    MetricsReport}; on a session failure every report comes back
    incomplete.
    """
    if not windows:
        raise MalformedInputError("empty corpus")
    if any(w.label is None for w in windows):
        raise MalformedInputError("corpus must carry ground-truth labels")
    models = sorted(models, key=lambda m: (m.feature_kind, m.kind))
    window_len = windows[0].length
    truth = np.array([w.label for w in windows], dtype=np.int64)
    X = np.stack([w.samples for w in windows])

    from .classifiers import infer as _infer
    from .features import extract as _extract

    def program(eng, h):
        """Runs on every party; returns {key: (labels, rounds..., ms...)}."""
        res = {}
        for fk in sorted({m.feature_kind for m in models}):
            t0 = time.perf_counter()
            base = eng.counter.snapshot()["total"]
            with eng.phase("fe"):
                fv = _extract(eng, h, fk, window_len=window_len)
            fe_rounds = eng.counter.snapshot()["total"] - base
            fe_ms = (time.perf_counter() - t0) * 1e3
            for m in [m for m in models if m.feature_kind == fk]:
                t1 = time.perf_counter()
                base = eng.counter.snapshot()["total"]
                with eng.phase("inference"):
                    bit = _infer(eng, fv, m)
                in_rounds = eng.counter.snapshot()["total"] - base
                in_ms = (time.perf_counter() - t1) * 1e3
                eng.mark_output(bit)
                with eng.phase("open"):
                    opened = eng.open_output(bit)
                res[(m.kind, fk)] = (
                    np.asarray(opened, dtype=np.int64), fe_rounds, in_rounds,
                    fe_ms, in_ms, (time.perf_counter() - t0) * 1e3)
        return res

    flat = X.reshape(-1)
    rows = share_vec(FIELD.arr(CODEC.encode_vec(flat)), POLICY, FIELD,
                     rng=np.random.default_rng(seed))
    hub = InMemoryHub()
    engines, _ = make_local_session(FIELD, CODEC, POLICY, hub,
                                    mode=MODE_PRODUCTION, seed=seed)
    results, errors = {}, {}

    def run(i):
        try:
            eng = engines[i]
            results[i] = program(eng, eng.load_input(rows[i - 1],
                                                     CODEC.frac_bits))
        except Exception as e:
            errors[i] = e

    threads = [threading.Thread(target=run, args=(i,)) for i in engines]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    hub.close()

    reports = {}
    if errors:
        note = str(errors[min(errors)])
        for m in models:
            reports[(m.kind, m.feature_kind)] = MetricsReport(
                0, 0, 0, 0, 0.0, (), len(windows), 0, 0, 0, 0.0, 0.0, 0.0,
                incomplete=True, note=note)
        return reports

    feats_cache = {fk: oracle_features_batch(X, fk)
                   for fk in {m.feature_kind for m in models}}
    first = results[min(results)]
    for m in models:
        key = (m.kind, m.feature_kind)
        labels, fe_rounds, in_rounds, fe_ms, in_ms, wall = first[key]
        margins = oracle_margin(feats_cache[m.feature_kind], m)
        oracle_labels = (margins >= 0).astype(np.int64)
        tp, fp, tn, fn = confusion(truth, labels)
        agree = labels == oracle_labels
        mism = tuple(float(abs(v)) for v in margins[~agree])
        reports[key] = MetricsReport(
            tp, fp, tn, fn, float(np.mean(agree)), mism, len(windows),
            fe_rounds, in_rounds, 1, fe_ms, in_ms, wall)
    return reports


# -- localhost tcp deployment ------------------------------------------

def _free_ports(count):
    socks = [socket.socket() for _ in range(count)]
    try:
        for s in socks:
            s.bind(("127.0.0.1", 0))
        return [s.getsockname()[1] for s in socks]
    finally:
        for s in socks:
            s.close()


def _wait_listening(ports, timeout=15.0):
    deadline = time.monotonic() + timeout
    for port in ports:
        while True:
            try:
                with socket.create_connection(("127.0.0.1", port),
                                              timeout=0.25):
                    break
            except OSError:
                if time.monotonic() > deadline:
                    raise ConfigError(
                        f"party on port {port} never started listening")
                time.sleep(0.05)


class LocalParties:
    """Three party processes on localhost, torn down on exit."""

    def __init__(self, model: ModelParams, window_len=DEFAULT_WINDOW,
                 work_dir=None, extra_args=()):
        self.dir = work_dir or tempfile.mkdtemp(prefix="falldet-")
        os.makedirs(self.dir, exist_ok=True)
        self.model_path = os.path.join(self.dir, "model.json")
        export_model(model, self.model_path)
        self.ports = _free_ports(POLICY.n)
        peers = {"parties": [
            {"id": j, "host": "127.0.0.1", "port": self.ports[j - 1]}
            for j in range(1, POLICY.n + 1)]}
        self.peer_path = os.path.join(self.dir, "peers.json")
        with open(self.peer_path, "w") as fh:
            json.dump(peers, fh)
        self.window_len = window_len
        self.extra_args = tuple(extra_args)
        self.procs = []

    def timing_path(self, j):
        return os.path.join(self.dir, f"party{j}-timing.csv")

    def __enter__(self):
        for j in range(1, POLICY.n + 1):
            cmd = [sys.executable, "-m", "falldet", "party",
                   "--party-id", str(j),
                   "--listen", f"127.0.0.1:{self.ports[j - 1]}",
                   "--peers", self.peer_path,
                   "--model", self.model_path,
                   "--store", os.path.join(self.dir, f"party{j}-store"),
                   "--window", str(self.window_len),
                   "--timing-out", self.timing_path(j),
                   *self.extra_args]
            self.procs.append(subprocess.Popen(
                cmd, stdout=subprocess.DEVNULL, stderr=subprocess.PIPE))
        try:
            _wait_listening(self.ports)
        except ConfigError:
            self.__exit__(None, None, None)
            raise
        return self

    def __exit__(self, *exc):
        for p in self.procs:
            p.terminate()
        for p in self.procs:
            try:
                p.wait(timeout=5)
            except subprocess.TimeoutExpired:
                p.kill()

    def device(self, timeout=30.0):
        """A device client dialling the spawned parties over TCP."""
        table = {j: PeerEntry(j, "127.0.0.1", self.ports[j - 1])
                 for j in range(1, POLICY.n + 1)}
        holder = {}
        node = TcpNode(0, ("127.0.0.1", 0), table,
                       lambda env: holder["dev"].deliver(env))
        dev = DeviceClient(POLICY, FIELD, CODEC, node.send, timeout=timeout,
                           meta={"reply_host": "127.0.0.1",
                                 "reply_port": node.listen_port})
        holder["dev"] = dev
        return dev, node


def _tcp_run(windows, model, work_dir):
    with LocalParties(model, windows[0].length, work_dir=work_dir) as parties:
        dev, node = parties.device()
        try:
            labels = []
            t0 = time.perf_counter()
            for w in windows:
                label, _ = dev.classify_window(w)
                labels.append(label)
            wall_ms = (time.perf_counter() - t0) * 1e3
        finally:
            node.close()
        fe_ms, in_ms = _mean_phase_times(parties.timing_path(1))
    return np.array(labels, dtype=np.int64), fe_ms, in_ms, wall_ms


def _mean_phase_times(timing_csv):
    if not os.path.exists(timing_csv):
        return 0.0, 0.0
    with open(timing_csv, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        return 0.0, 0.0
    fe = float(np.mean([float(r["fe_ms"]) for r in rows]))
    inf = float(np.mean([float(r["in_ms"]) for r in rows]))
    return fe, inf


# -- cost benchmarks ----------------------------------------------------

def benchmark_rounds(feature_kind, classifier_kind,
                     window_len=DEFAULT_WINDOW, measured=True):
    """Static schedule round counts, optionally cross-checked against an
    instrumented one-window run."""
    row = {
        "features": feature_kind,
        "classifier": classifier_kind,
        "window_len": window_len,
        "fe_rounds": pipeline.features.feature_rounds(feature_kind, window_len),
        "in_rounds": pipeline.classifiers.inference_rounds(classifier_kind),
        "open_rounds": 1,
    }
    row["total_rounds"] = (row["fe_rounds"] + row["in_rounds"]
                           + row["open_rounds"])
    if measured:
        model = _probe_model(classifier_kind, feature_kind, window_len)
        corpus = gen_corpus(1, window_len=window_len, seed=1,
                            fall_fraction=0.0)
        _, res, _ = _batched_session(corpus, model, seed=1)
        row["measured_fe"] = res.fe_rounds
        row["measured_in"] = res.in_rounds
        row["measured_total"] = res.total_rounds
    return row


def round_table(window_len=DEFAULT_WINDOW, measured=True):
    from .classifiers import MODEL_KINDS
    from .features import KINDS
    return [benchmark_rounds(fk, ck, window_len, measured=measured)
            for fk in KINDS for ck in MODEL_KINDS]


def _probe_model(classifier_kind, feature_kind, window_len):
    """Tiny hand-set model, used only to drive cost measurements."""
    from .classifiers import load_model
    from .features import feature_dimension
    dim = feature_dimension(feature_kind, window_len)
    doc = {"kind": classifier_kind, "feature_kind": feature_kind,
           "dimension": dim, "frac_bits": CODEC.frac_bits,
           "weights": None, "bias": None, "means": None,
           "variances": None, "log_priors": None}
    if classifier_kind == "nb":
        doc["means"] = [[0.0] * dim, [1.0] * dim]
        doc["variances"] = [[1.0] * dim, [1.0] * dim]
        doc["log_priors"] = [-0.7, -0.7]
    else:
        doc["weights"] = [0.01] * dim
        doc["bias"] = -0.5
    return load_model(doc)


def compare_latency(delays=(0.0, 0.010, 0.020), feature_kind="derivative",
                    classifier_kind="svm", window_len=DEFAULT_WINDOW,
                    seed=0, repeats=1):
    """One-window sessions under injected symmetric peer delay.

    network_ms is the wall-clock increase over the zero-delay baseline;
    with r rounds it should track r * delay. repeats > 1 keeps the
    fastest session per delay: the injected delay is a hard floor and
    scheduler noise only ever adds time, so the minimum is the cleanest
    estimate on a loaded host.
    """
    model = _probe_model(classifier_kind, feature_kind, window_len)
    corpus = gen_corpus(1, window_len=window_len, seed=seed)
    rows = []
    base = None
    for d in sorted(delays):
        walls = []
        for _ in range(max(1, repeats)):
            gc.collect()
            _, res, wall = _batched_session(corpus, model, seed=seed, delay=d)
            walls.append(wall)
        wall_ms = min(walls)
        if base is None and d == 0.0:
            base = wall_ms
        rows.append({
            "delay_ms": d * 1e3,
            "rounds": res.total_rounds,
            "fe_ms": res.fe_ms,
            "in_ms": res.in_ms,
            "wall_ms": wall_ms,
            "network_ms": wall_ms - base if base is not None else float("nan"),
        })
    return rows


def write_csv_report(rows, path, fields=None):
    """Dump dict rows (or MetricsReports) to CSV."""
    if not rows:
        return path
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        if isinstance(rows[0], MetricsReport):
            w.writerow(MetricsReport.CSV_FIELDS)
            for r in rows:
                w.writerow(r.as_csv_row())
        else:
            fields = fields or list(rows[0])
            w.writerow(fields)
            for r in rows:
                w.writerow([r.get(k, "") for k in fields])
    return path
