"""Pretrain PFH on a cluster, transfer to new microgrids, and count rounds to a reward target.

The target for each seed is the mean reward of the freshly initialised arm
over its first ``--window`` rounds; the script reports how many rounds each
arm needs to reach it.
"""

from __future__ import annotations

import argparse

import numpy as np

from fedgrid.config import config_from_kv
from fedgrid.experiment import read_metrics, round_means, rounds_to_reach, run_experiment, run_transfer


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", default="0,1,2,3,4")
    ap.add_argument("--pretrain-microgrids", type=int, default=4)
    ap.add_argument("--transfer-microgrids", type=int, default=2)
    ap.add_argument("--prosumers", type=int, default=2)
    ap.add_argument("--sigma", default="30")
    ap.add_argument("--pretrain-days", default="1000")
    ap.add_argument("--transfer-days", default="400")
    ap.add_argument("--transfer-local-steps", default="2")
    ap.add_argument("--window", type=int, default=10)
    ap.add_argument("--out", default="runs/transfer")
    args = ap.parse_args()

    pre_kv = {
        "algorithm": "PFH", "scenario.n_microgrids": str(args.pretrain_microgrids),
        "scenario.n_prosumers": str(args.prosumers), "scenario.sigma": args.sigma,
        "horizon_days": args.pretrain_days, "ppo.batch_size": "20", "seeds": args.seeds, "output_dir": args.out,
    }
    pre = run_experiment(config_from_kv(pre_kv))
    print(f"pretrained states in {pre.parent}")
    tr_kv = dict(pre_kv, **{
        "scenario.n_microgrids": str(args.transfer_microgrids), "scenario.seed": "1000",
        "horizon_days": args.transfer_days, "local_steps": args.transfer_local_steps,
    })
    path = run_transfer(config_from_kv(tr_kv), pre.parent)
    print(f"transfer metrics in {path}\n")

    rows = read_metrics(path)
    arm = {i.rsplit("-", 1)[1]: i for i in {r.run_id for r in rows}}
    warm, cold = round_means(rows, arm["pretrained"]), round_means(rows, arm["baseline"])
    print(f"{'seed':>4s} {'target':>8s} {'pretrained':>11s} {'baseline':>9s}")
    for seed in sorted({s for s, _ in warm}):
        w = [v for (s, _), v in warm.items() if s == seed]
        b = [v for (s, _), v in cold.items() if s == seed]
        target = float(np.mean(b[: args.window]))
        print(f"{seed:4d} {target:8.1f} {rounds_to_reach(w, target)!s:>11s} {rounds_to_reach(b, target)!s:>9s}")


if __name__ == "__main__":
    main()
