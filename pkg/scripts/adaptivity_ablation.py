"""Adaptive threshold with the learning rate on and off.

    python scripts/adaptivity_ablation.py [--config configs/ablation.cfg] [--out CSV]
"""

import argparse
from pathlib import Path

from sqsd import harness

ROOT = Path(__file__).resolve().parent.parent


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default=ROOT / "configs" / "ablation.cfg")
    ap.add_argument("--out")
    args = ap.parse_args()
    cfg = harness.load_config(args.config)
    result = harness.run_experiment(cfg, with_theorem1=False)
    out = Path(args.out or cfg.out or "ablation.csv")
    out.parent.mkdir(parents=True, exist_ok=True)
    harness.emit_csv(result, out)

    table = {}
    print(f"{'T':>5s} {'beta1':>9s} {'eta':>6s} {'rate':>7s} {'stderr':>7s} {'avg dropped':>12s}")
    for agg in result.aggregates:
        p = agg.point
        beta1 = agg.runs[0].beta_init
        table[(p.temperature, beta1, p.eta)] = agg.mean["resampling_rate"]
        print(f"{p.temperature:5.2f} {beta1:9.5f} {p.eta:6g} {agg.mean['resampling_rate']:7.4f} "
              f"{agg.stderr['resampling_rate']:7.4f} {agg.mean['avg_dropped_mass']:12.5f}")
    print()
    for (t, beta1, eta), rate in sorted(table.items()):
        if eta > 0 and (t, beta1, 0.0) in table:
            frozen = table[(t, beta1, 0.0)]
            verdict = "adaptive wins" if rate <= frozen else "adaptive loses"
            print(f"T={t} beta1={beta1:.5f}: eta={eta} {rate:.4f} vs eta=0 {frozen:.4f} -> {verdict}")
    print(f"wrote {out}")


if __name__ == "__main__":
    main()
