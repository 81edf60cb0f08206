"""Command line entry points.

device       share a CSV of IMU samples to the parties, print labels
party        run one cloud party until interrupted
run          classify a corpus end to end and print metrics
bench-rounds static round-count table for the schedules
bench-latency one-window runs under injected peer delay
gen-corpus   write a seeded synthetic corpus CSV
"""

from __future__ import annotations

import argparse
import csv
import signal
import sys
import threading

from .classifiers import MODEL_KINDS, bundled_model, load_model
from .device import DeviceClient, make_windows, read_csv
from .errors import ConfigError, FalldetError
from .features import DEFAULT_RATE_HZ, DEFAULT_WINDOW, KINDS
from .field import MERSENNE61, FixedPointCodec, PrimeField
from .party import PartyService, ShareStore
from .shamir import SharingPolicy
from .transport import PeerEntry, TcpNode, load_peer_config

FIELD = PrimeField(MERSENNE61)
CODEC = FixedPointCodec(FIELD)
POLICY = SharingPolicy(n=3, degree=1)


def _model_from_args(args):
    if getattr(args, "model", None):
        return load_model(args.model)
    return bundled_model(args.classifier, args.features)


def _add_model_flags(p, required=False):
    p.add_argument("--features", choices=KINDS, default="derivative",
                   help="feature pipeline (default derivative)")
    p.add_argument("--classifier", choices=MODEL_KINDS, default="svm",
                   help="classifier kind (default svm)")
    p.add_argument("--model", help="model JSON file "
                   "(default: bundled fixture for the chosen pair)")
    _ = required


# -- device -------------------------------------------------------------

def cmd_device(args):
    peers = load_peer_config(args.parties)
    windows = make_windows(read_csv(args.input), args.window,
                           stride=args.stride)
    if not windows:
        print("no complete windows in input", file=sys.stderr)
        return 1
    holder = {}
    node = TcpNode(0, (args.reply_host, 0), peers,
                   lambda env: holder["dev"].deliver(env))
    dev = DeviceClient(POLICY, FIELD, CODEC, node.send, timeout=args.timeout,
                       meta={"reply_host": args.reply_host,
                             "reply_port": node.listen_port,
                             "features": args.features,
                             "classifier": args.classifier})
    holder["dev"] = dev
    try:
        for k, w in enumerate(windows):
            label, _ = dev.classify_window(w)
            truth = "" if w.label is None else f" truth={w.label}"
            print(f"window {k}: label={label}{truth}")
    finally:
        node.close()
        if args.timing_out:
            with open(args.timing_out, "w", newline="") as fh:
                wcsv = csv.writer(fh)
                wcsv.writerow(["session_id", "share_ms", "upload_ms",
                               "total_ms", "label"])
                for t in dev.timings:
                    wcsv.writerow([t["session_id"], f"{t['share_ms']:.3f}",
                                   f"{t['upload_ms']:.3f}",
                                   f"{t['total_ms']:.3f}", t["label"]])
    return 0


# -- party --------------------------------------------------------------

def cmd_party(args):
    import os

    host, _, port = args.listen.rpartition(":")
    peers = load_peer_config(args.peers)
    model = load_model(args.model)
    if args.features and args.features != model.feature_kind:
        raise ConfigError(f"model uses {model.feature_kind} features, "
                          f"--features asked for {args.features}")
    if args.classifier and args.classifier != model.kind:
        raise ConfigError(f"model is a {model.kind}, "
                          f"--classifier asked for {args.classifier}")
    os.makedirs(args.store, exist_ok=True)
    store = ShareStore(os.path.join(args.store, "shares.ndjson"))

    node_holder = {}

    def route_device(meta):
        node = node_holder["node"]
        node.peers[0] = PeerEntry(0, meta["reply_host"],
                                  int(meta["reply_port"]))

    service = PartyService(
        args.party_id, POLICY, FIELD, CODEC, model, args.window, store,
        lambda dest, env: node_holder["node"].send(dest, env),
        timing_path=args.timing_out, device_route_fn=route_device)
    table = {j: p for j, p in peers.items() if j != args.party_id}
    node = TcpNode(args.party_id, (host or "127.0.0.1", int(port)), table,
                   service.on_message, tls_cert=args.tls_cert,
                   tls_key=args.tls_key)
    node_holder["node"] = node
    print(f"party {args.party_id} listening on {host}:{node.listen_port}",
          flush=True)
    stop = threading.Event()
    signal.signal(signal.SIGTERM, lambda *_: stop.set())
    try:
        stop.wait()
    except KeyboardInterrupt:
        pass
    finally:
        node.close()
        service.close()
    return 0


# -- harness commands ---------------------------------------------------

def _load_corpus(args):
    from . import harness

    if args.corpus:
        return harness.load_csv_corpus(args.corpus, args.window,
                                       stride=args.stride)
    return harness.gen_corpus(args.synthetic, window_len=args.window,
                              seed=args.seed)


def cmd_run(args):
    from . import harness

    model = _model_from_args(args)
    windows = _load_corpus(args)
    report = harness.run_pipeline(windows, model, mode=args.transport,
                                  seed=args.seed)
    print(f"{model.kind} + {model.feature_kind}, {args.transport} transport")
    print(report.as_text())
    if args.report_out:
        harness.write_csv_report([report], args.report_out)
        print(f"report written to {args.report_out}")
    return 1 if report.incomplete else 0


def cmd_bench_rounds(args):
    from . import harness

    rows = harness.round_table(args.window, measured=not args.static_only)
    cols = list(rows[0])
    widths = [max(len(c), *(len(str(r[c])) for r in rows)) for c in cols]
    print("  ".join(c.ljust(w) for c, w in zip(cols, widths)))
    for r in rows:
        print("  ".join(str(r[c]).ljust(w) for c, w in zip(cols, widths)))
    if args.report_out:
        harness.write_csv_report(rows, args.report_out, fields=cols)
    return 0


def cmd_bench_latency(args):
    from . import harness

    delays = [float(d) / 1e3 for d in args.delays.split(",")]
    rows = harness.compare_latency(delays, args.features, args.classifier,
                                   args.window, seed=args.seed,
                                   repeats=args.repeats)
    print(f"{args.classifier} + {args.features}, window {args.window}")
    for r in rows:
        print(f"  delay {r['delay_ms']:6.1f} ms  rounds {r['rounds']:4d}  "
              f"fe {r['fe_ms']:8.1f} ms  in {r['in_ms']:7.1f} ms  "
              f"total {r['wall_ms']:8.1f} ms  network {r['network_ms']:8.1f} ms")
    if args.report_out:
        harness.write_csv_report(rows, args.report_out)
    return 0


def cmd_gen_corpus(args):
    from . import harness

    windows = harness.gen_corpus(args.count, window_len=args.window,
                                 seed=args.seed,
                                 fall_fraction=args.fall_fraction)
    harness.corpus_to_csv(windows, args.out, rate_hz=args.rate)
    falls = sum(w.label for w in windows)
    print(f"wrote {len(windows)} windows ({falls} falls) to {args.out}")
    return 0


# -- parser -------------------------------------------------------------

def build_parser():
    ap = argparse.ArgumentParser(
        prog="falldet",
        description="privacy-preserving fall detection over three parties")
    sub = ap.add_subparsers(dest="command", required=True)

    d = sub.add_parser("device", help="share a CSV and collect labels")
    d.add_argument("--input", required=True, help="IMU CSV file")
    d.add_argument("--parties", required=True, help="peer config JSON")
    d.add_argument("--window", type=int, default=DEFAULT_WINDOW)
    d.add_argument("--stride", type=int, default=None)
    d.add_argument("--rate", type=float, default=DEFAULT_RATE_HZ)
    d.add_argument("--timeout", type=float, default=30.0)
    d.add_argument("--reply-host", default="127.0.0.1",
                   help="address parties answer to")
    d.add_argument("--timing-out", help="per-session timing CSV")
    _add_model_flags(d)
    d.set_defaults(fn=cmd_device)

    p = sub.add_parser("party", help="run one cloud party")
    p.add_argument("--party-id", type=int, required=True)
    p.add_argument("--listen", required=True, help="host:port to bind")
    p.add_argument("--peers", required=True, help="peer config JSON")
    p.add_argument("--model", required=True, help="model JSON file")
    p.add_argument("--store", required=True, help="share log directory")
    p.add_argument("--window", type=int, default=DEFAULT_WINDOW)
    p.add_argument("--timing-out", help="per-session timing CSV")
    p.add_argument("--tls-cert")
    p.add_argument("--tls-key")
    p.add_argument("--features", choices=KINDS,
                   help="cross-check: require this feature pipeline")
    p.add_argument("--classifier", choices=MODEL_KINDS,
                   help="cross-check: require this classifier kind")
    p.set_defaults(fn=cmd_party)

    r = sub.add_parser("run", help="classify a corpus and print metrics")
    r.add_argument("--corpus", help="labelled CSV (default: synthetic)")
    r.add_argument("--synthetic", type=int, default=200,
                   help="synthetic corpus size when no --corpus")
    r.add_argument("--window", type=int, default=DEFAULT_WINDOW)
    r.add_argument("--stride", type=int, default=None)
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--transport", choices=("memory", "tcp"),
                   default="memory")
    r.add_argument("--report-out", help="metrics CSV")
    _add_model_flags(r)
    r.set_defaults(fn=cmd_run)

    b = sub.add_parser("bench-rounds", help="round-count table")
    b.add_argument("--window", type=int, default=DEFAULT_WINDOW)
    b.add_argument("--static-only", action="store_true",
                   help="skip the instrumented cross-check run")
    b.add_argument("--report-out")
    b.set_defaults(fn=cmd_bench_rounds)

    l = sub.add_parser("bench-latency", help="latency vs injected delay")
    l.add_argument("--delays", default="0,10,20",
                   help="comma-separated delays in ms")
    l.add_argument("--window", type=int, default=DEFAULT_WINDOW)
    l.add_argument("--seed", type=int, default=0)
    l.add_argument("--repeats", type=int, default=1,
                   help="sessions per delay, fastest wall time is kept")
    l.add_argument("--report-out")
    _add_model_flags(l)
    l.set_defaults(fn=cmd_bench_latency)

    g = sub.add_parser("gen-corpus", help="write a synthetic corpus CSV")
    g.add_argument("--count", type=int, default=1000)
    g.add_argument("--window", type=int, default=DEFAULT_WINDOW)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--fall-fraction", type=float, default=0.5)
    g.add_argument("--rate", type=float, default=DEFAULT_RATE_HZ)
    g.add_argument("--out", required=True)
    g.set_defaults(fn=cmd_gen_corpus)
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except FalldetError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except KeyboardInterrupt:
        return 130


if __name__ == "__main__":
    raise SystemExit(main())
