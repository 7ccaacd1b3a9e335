"""Monte Carlo check of the expected-rejection bound and the threshold guarantee.

For each divergence level, runs many short seeded sessions and compares the
mean number of rejected-and-resampled tokens with the bound evaluated
exactly along each run. Then runs long adaptive-threshold sessions and
checks the average dropped mass against its guarantee at every prefix.

    python scripts/check_bounds.py [--runs 200] [--batches 50]
"""

import argparse
import sys

from sqsd import harness
from sqsd.engine import CloudNode, DraftParams, EdgeNode, run_direct
from sqsd.models import SyntheticModelSpec, synthetic_pair


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--runs", type=int, default=200)
    ap.add_argument("--batches", type=int, default=50)
    ap.add_argument("--vocab", type=int, default=64)
    ap.add_argument("--tokens", type=int, default=10_000, help="committed tokens per threshold run")
    ap.add_argument("--seeds", type=int, default=10)
    args = ap.parse_args()
    failed = False

    print("expected rejections vs bound")
    for eps in (0.0, 0.1, 0.3):
        model = synthetic_pair(SyntheticModelSpec(vocab_size=args.vocab, divergence=eps), 1.0)
        for params in (DraftParams("k-sqs", k=8), DraftParams("c-sqs")):
            r = harness.evaluate_theorem1(model, params, args.runs, args.batches)
            failed |= not r.holds
            print(f"  eps={eps:<4} {params.scheme.label:6s} N_rej={r.mean_rejections:8.3f} "
                  f"rhs={r.mean_rhs:8.3f} 4se={4 * r.stderr:6.3f} {'ok' if r.holds else 'VIOLATED'}")

    print("average dropped mass vs guarantee")
    model = synthetic_pair(SyntheticModelSpec(vocab_size=args.vocab), 1.0)
    for seed in range(args.seeds):
        edge = EdgeNode(model, DraftParams("c-sqs"), seed)
        run_direct(edge, CloudNode(model, seed), max_tokens=args.tokens)
        chk = harness.check_theorem2(edge)
        bad = chk.violations(edge.params.eta, edge.params.alpha)
        failed |= bool(bad)
        print(f"  seed {seed}: T={chk.tokens} max excess={chk.max_excess:.4f} "
              f"telescoping gap={chk.telescoping_gap:.2e} "
              f"beta in [{chk.beta_min:.5f}, {chk.beta_max:.5f}] {'; '.join(bad) or 'ok'}")
    sys.exit(2 if failed else 0)


if __name__ == "__main__":
    main()
