"""Fixed top-K versus adaptive threshold across temperature.

Prints the seed-averaged resampling rate per grid point and whether the
best K at low temperature loses to the adaptive threshold at high
temperature.

    python scripts/crossover.py [--config configs/crossover.cfg] [--out CSV]
"""

import argparse
from pathlib import Path

from sqsd import harness
from sqsd.codec import Scheme

ROOT = Path(__file__).resolve().parent.parent


def crossover(result):
    """(best K at the lowest temperature, {temperature: (k-sqs rate, c-sqs rate)})."""
    rates = {}
    for agg in result.aggregates:
        p = agg.point
        key = ("k", p.k) if p.scheme is Scheme.K_SQS else ("c", None)
        rates[(p.temperature, key)] = agg.mean["resampling_rate"]
    temps = sorted({t for t, _ in rates})
    ks = sorted(k for t, (kind, k) in rates if kind == "k" and t == temps[0])
    best = min(ks, key=lambda k: rates[(temps[0], ("k", k))])
    return best, {t: (rates[(t, ("k", best))], rates[(t, ("c", None))]) for t in temps}


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default=ROOT / "configs" / "crossover.cfg")
    ap.add_argument("--out")
    ap.add_argument("--seeds", help="override the seed list, e.g. 0..9")
    args = ap.parse_args()
    cfg = harness.load_config(args.config)
    if args.seeds:
        cfg = harness.parse_config("seeds = " + args.seeds, cfg)
    result = harness.run_experiment(cfg, with_theorem1=False)
    out = Path(args.out or cfg.out or "crossover.csv")
    out.parent.mkdir(parents=True, exist_ok=True)
    harness.emit_csv(result, out)

    print(f"{'scheme':8s} {'T':>5s} {'K':>4s} {'rate':>7s} {'stderr':>7s} {'ms/token':>9s}")
    for agg in result.aggregates:
        p = agg.point
        print(f"{p.scheme.label:8s} {p.temperature:5.2f} {p.k or '-':>4} "
              f"{agg.mean['resampling_rate']:7.4f} {agg.stderr['resampling_rate']:7.4f} "
              f"{agg.mean['avg_total_time'] * 1e3:9.3f}")
    best, pairs = crossover(result)
    lo, hi = min(pairs), max(pairs)
    print(f"\nbest K at T={lo}: {best}")
    for t, (k_rate, c_rate) in sorted(pairs.items()):
        print(f"T={t}: k-sqs(K={best}) {k_rate:.4f}  c-sqs {c_rate:.4f}")
    ok = pairs[lo][0] < pairs[lo][1] and pairs[hi][1] < pairs[hi][0]
    print("crossover reproduced" if ok else "no crossover")
    print(f"wrote {out}")


if __name__ == "__main__":
    main()
