"""Command-line entry point.

Exit codes: 0 success, 1 configuration error, 2 a bound or roundtrip check
failed, 3 I/O or connection failure.
"""

from __future__ import annotations

import argparse
import socket
import sys

import numpy as np

from . import harness
from .codec import LatticeDistribution, Scheme, lattice_counts
from .engine import CloudNode, EdgeNode
from .errors import ConfigError, HandshakeError, SQSError, TraceError
from .transport import (DraftPacket, SocketChannel, decode_draft, draft_payload_bits, encode_draft,
                        parse_hostport, run_cloud, run_edge)

EXIT_OK, EXIT_CONFIG, EXIT_BOUND, EXIT_IO = 0, 1, 2, 3


def _load(path) -> harness.ExperimentConfig:
    return harness.load_config(path)


def cmd_run(args) -> int:
    cfg = _load(args.config)
    out = args.out or cfg.out
    if not out:
        raise ConfigError("out: no output path (use --out or set out in the config)")
    result = harness.run_experiment(cfg, with_theorem1=not args.no_theorem1)
    harness.emit_csv(result, out)
    for agg in result.aggregates:
        p = agg.point
        tag = f"k={p.k}" if p.k is not None else (
            f"eta={p.eta} beta1={agg.runs[0].beta_init:.4g}" if p.eta is not None else "")
        print(f"{p.scheme.label:8s} T={p.temperature:<5g} {tag:28s} "
              f"resampling={agg.mean['resampling_rate']:.4f} "
              f"time/token={agg.mean['avg_total_time'] * 1e3:.3f}ms")
    print(f"wrote {out}")
    return EXIT_OK


def cmd_verify_bounds(args) -> int:
    cfg = _load(args.config)
    failures = []
    for point in harness.grid_points(cfg):
        model = cfg.build_model(point.temperature)
        params = point.params(cfg)
        for seed in cfg.seeds:
            rec = harness.run_single(cfg, point, seed, model, with_theorem1=False)
            if rec.metrics.max_bits_per_batch > cfg.budget:
                failures.append(f"{point}: seed {seed} batch used "
                                f"{rec.metrics.max_bits_per_batch} bits > {cfg.budget}")
            if rec.edge.threshold is not None:
                chk = harness.check_theorem2(rec.edge)
                for v in chk.violations(params.eta, params.alpha):
                    failures.append(f"{point}: seed {seed}: {v}")
        t1 = harness.evaluate_theorem1(model, params, args.runs, args.batches)
        status = "ok" if t1.holds else "VIOLATED"
        print(f"{point.scheme.label:8s} T={point.temperature:<5g} k={point.k} eta={point.eta} "
              f"N_rej={t1.mean_rejections:.3f} rhs={t1.mean_rhs:.3f} "
              f"(4se={4 * t1.stderr:.3f}) {status}")
        if not t1.holds:
            failures.append(f"{point}: expected rejections {t1.mean_rejections} exceed the bound")
    for f in failures:
        print("FAIL", f)
    print("all bounds hold" if not failures else f"{len(failures)} violation(s)")
    return EXIT_BOUND if failures else EXIT_OK


def _random_lattice(rng, vocab_size: int, k: int, ell: int) -> LatticeDistribution:
    support = sorted(rng.choice(vocab_size, size=k, replace=False).tolist())
    counts = lattice_counts(rng.dirichlet(np.ones(k)), ell)
    if not any(counts):  # pragma: no cover - lattice sums to ell >= 1
        counts[0] = ell
    return LatticeDistribution(tuple(counts), ell, tuple(support))


def cmd_codec_test(args) -> int:
    rng = np.random.default_rng(args.seed)
    bad = 0
    for i in range(args.count):
        vocab = int(rng.choice(args.vocab))
        scheme = Scheme(int(rng.integers(3)))
        k_session = int(rng.integers(1, vocab + 1))
        entries = []
        for _ in range(int(rng.integers(0, 6))):
            k = {Scheme.QS_DENSE: vocab, Scheme.K_SQS: k_session}.get(
                scheme, int(rng.integers(1, vocab + 1)))
            lat = _random_lattice(rng, vocab, k, args.ell)
            nz = [s for s, c in zip(lat.support, lat.counts) if c]
            entries.append((int(rng.choice(nz)), lat))
        packet = DraftPacket(int(rng.integers(1 << 32)), scheme, tuple(entries))
        k_arg = k_session if scheme is Scheme.K_SQS else None
        data = encode_draft(packet, vocab, args.ell, k_arg)
        back = decode_draft(data, vocab, args.ell, scheme, k_arg)
        bits = draft_payload_bits(packet, vocab, args.ell, k_arg)
        if back != packet or len(data) != 7 + (bits + 7) // 8:
            bad += 1
            print(f"mismatch on packet {i}: scheme={scheme.label} V={vocab}")
    print(f"{args.count - bad}/{args.count} packets round-tripped")
    return EXIT_BOUND if bad else EXIT_OK


def _session_parts(args):
    cfg = _load(args.config)
    points = harness.grid_points(cfg)
    if not 0 <= args.point < len(points):
        raise ConfigError(f"point: index {args.point} outside 0..{len(points) - 1}")
    point = points[args.point]
    seed = cfg.seeds[0] if args.seed is None else args.seed
    return cfg, point, point.params(cfg), cfg.build_model(point.temperature), seed


def cmd_serve_cloud(args) -> int:
    cfg, point, params, model, seed = _session_parts(args)
    host, port = parse_hostport(args.listen)
    with socket.create_server((host, port)) as server:
        print(f"cloud listening on {host}:{server.getsockname()[1]}", flush=True)
        conn, peer = server.accept()
        ch = SocketChannel(conn)
        try:
            res = run_cloud(ch, CloudNode(model, seed), params)
        finally:
            ch.close()
    print(f"served {len(res.outcomes)} batches to {peer[0]}; transcript {res.transcript.digest()}")
    return EXIT_OK


def cmd_run_edge(args) -> int:
    cfg, point, params, model, seed = _session_parts(args)
    host, port = parse_hostport(args.connect)
    edge = EdgeNode(model, params, seed)
    ch = SocketChannel(socket.create_connection((host, port), timeout=args.timeout))
    try:
        res = run_edge(ch, edge, cfg.max_batches, cfg.max_tokens)
    finally:
        ch.close()
    rec = harness.summarize(cfg.latency, point, seed, model, params, edge, res.outcomes)
    m = rec.metrics
    print(f"{m.batches} batches, {m.tokens_generated} tokens, resampling={m.resampling_rate:.4f}, "
          f"transcript {res.transcript.digest()}")
    if args.out:
        agg = harness.aggregate(point, [m])
        harness.emit_csv(harness.ExperimentResult(cfg, [m], [agg]), args.out)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="sqsd", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run an experiment sweep and write CSV")
    p.add_argument("config")
    p.add_argument("--out", help="CSV path (overrides the config's out)")
    p.add_argument("--no-theorem1", action="store_true",
                   help="skip the per-run expected-rejection bound")
    p.set_defaults(fn=cmd_run)

    p = sub.add_parser("verify-bounds", help="check the budget and both rejection/distortion bounds")
    p.add_argument("config")
    p.add_argument("--runs", type=int, default=200, help="Monte Carlo runs per grid point")
    p.add_argument("--batches", type=int, default=50, help="batches per Monte Carlo run")
    p.set_defaults(fn=cmd_verify_bounds)

    p = sub.add_parser("codec-test", help="fuzz draft-packet encode/decode")
    p.add_argument("--count", type=int, default=10_000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--ell", type=int, default=100)
    p.add_argument("--vocab", type=int, nargs="+", default=[8, 64, 512])
    p.set_defaults(fn=cmd_codec_test)

    for name, flag, fn, help_ in (
            ("serve-cloud", "--listen", cmd_serve_cloud, "serve one socket session as the cloud"),
            ("run-edge", "--connect", cmd_run_edge, "connect to a cloud and run the edge")):
        p = sub.add_parser(name, help=help_)
        p.add_argument("config")
        p.add_argument(flag, required=True, metavar="HOST:PORT")
        p.add_argument("--point", type=int, default=0, help="grid point index (default 0)")
        p.add_argument("--seed", type=int, help="session seed (default: first config seed)")
        if name == "run-edge":
            p.add_argument("--out", help="optional CSV for this single run")
            p.add_argument("--timeout", type=float, default=30.0)
        p.set_defaults(fn=fn)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print("config error:", file=sys.stderr)
        for problem in exc.problems:
            print(f"  {problem}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, TraceError, HandshakeError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    except SQSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
