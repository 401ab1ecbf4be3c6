"""Final federated accuracy as a function of the DP noise level.

    python3 scripts/dp_sweep.py --sigmas 0 0.01 0.03 0.1 0.3 1 --seeds 0 1 2
"""
import argparse

import numpy as np

from fedvol.config import parse_config
from fedvol.scenarios import run_scenario


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--sigmas", type=float, nargs="+", default=[0.0, 0.01, 0.03, 0.1, 0.3, 1.0])
    ap.add_argument("--clip", type=float, default=1.0)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--rounds", type=int, default=50)
    args = ap.parse_args()

    print(f"{'sigma':>8}{'final acc':>12}{'best bce':>12}")
    for sigma in args.sigmas:
        finals, best = [], []
        for seed in args.seeds:
            cfg = parse_config(
                f"scenario = dp\ndata = synthetic\nseed = {seed}\nrounds = {args.rounds}\n"
                f"dp_clip = {args.clip}\ndp_sigma = {sigma}\n", env={})
            res = run_scenario(cfg, write=False)
            finals.append(res.history.select("fedavg_dp")[-1].accuracy)
            best.append(next(r.bce for r in res.summary if r.scheme == "fedavg_dp"))
        print(f"{sigma:>8g}{np.mean(finals):>12.4f}{np.mean(best):>12.4f}")


if __name__ == "__main__":
    main()
