"""Run NoRL, LocalOnly, FedAvg and PFH on one scenario and tabulate profit above NoRL.

Example::

    python3 scripts/baseline_comparison.py --set scenario.sigma=30 --set horizon_days=600 --seeds 0,1,2
"""

from __future__ import annotations

import argparse

import numpy as np

from fedgrid.config import config_from_kv
from fedgrid.experiment import profit_above_baseline, read_metrics, round_means, run_experiment

ALGORITHMS = ("NoRL", "LocalOnly", "FedAvg", "PFH")


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")
    ap.add_argument("--seeds", default="0,1,2,3,4")
    ap.add_argument("--out", default="runs/baselines")
    args = ap.parse_args()
    kv = dict(s.split("=", 1) for s in args.overrides)
    kv.update(seeds=args.seeds, output_dir=args.out)

    rows = {}
    for algo in ALGORITHMS:
        path = run_experiment(config_from_kv({**kv, "algorithm": algo}))
        rows[algo] = read_metrics(path)
        print(f"{algo:10s} -> {path}")

    print(f"\n{'algorithm':10s} {'final daily':>12s} {'cum. above NoRL':>16s}")
    for algo in ALGORITHMS:
        means = round_means(rows[algo])
        last = max(r for _, r in means)
        final = np.mean([v for (_, r), v in means.items() if r == last])
        above = np.mean(list(profit_above_baseline(rows[algo], rows["NoRL"]).values()))
        print(f"{algo:10s} {final:12.1f} {above:16.1f}")


if __name__ == "__main__":
    main()
