"""Paired PFH vs FedAvg table at one diversity level with matched training budgets."""

from __future__ import annotations

import argparse

import numpy as np

from fedgrid.config import config_from_kv
from fedgrid.experiment import read_metrics, round_means, run_experiment


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--sigma", default="30")
    ap.add_argument("--microgrids", default="5")
    ap.add_argument("--prosumers", default="2")
    ap.add_argument("--days", default="600")
    ap.add_argument("--seeds", default="0,1,2,3,4")
    ap.add_argument("--last", type=int, default=5, help="rounds averaged for the final reward")
    ap.add_argument("--out", default="runs/ordering")
    args = ap.parse_args()

    finals = {}
    seeds = [int(s) for s in args.seeds.split(",")]
    for algo in ("PFH", "FedAvg"):
        cfg = config_from_kv({
            "algorithm": algo, "scenario.sigma": args.sigma, "scenario.n_microgrids": args.microgrids,
            "scenario.n_prosumers": args.prosumers, "horizon_days": args.days, "ppo.batch_size": "20",
            "seeds": args.seeds, "output_dir": args.out,
        })
        means = round_means(read_metrics(run_experiment(cfg)))
        last = max(r for _, r in means)
        finals[algo] = np.array([
            np.mean([means[(s, r)] for r in range(last - args.last + 1, last + 1)]) for s in seeds
        ])
    diff = finals["PFH"] - finals["FedAvg"]
    print(f"{'seed':>4s} {'PFH':>8s} {'FedAvg':>8s} {'diff':>8s}")
    for k, s in enumerate(seeds):
        print(f"{s:4d} {finals['PFH'][k]:8.1f} {finals['FedAvg'][k]:8.1f} {diff[k]:8.1f}")
    se = np.std(diff, ddof=1) / np.sqrt(len(diff)) if len(diff) > 1 else float("nan")
    print(f"mean {finals['PFH'].mean():8.1f} {finals['FedAvg'].mean():8.1f} {diff.mean():8.1f}  (paired SE {se:.1f})")


if __name__ == "__main__":
    main()
