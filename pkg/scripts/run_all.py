"""Run every synthetic scenario config over several seeds and print mean summaries.

    python3 scripts/run_all.py --seeds 0 1 2 3 4 [--only iid quarters]

Per-seed metrics CSVs go to results/<scenario>_seed<k>.csv.
"""
import argparse
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from fedvol.config import load_config
from fedvol.scenarios import LABELS, run_scenario

ROOT = Path(__file__).resolve().parent.parent
SCENARIOS = ("iid", "quarters", "hetero", "dp", "transfer", "centralized", "local")


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    ap.add_argument("--only", nargs="+", choices=SCENARIOS, default=list(SCENARIOS))
    ap.add_argument("--out", default=str(ROOT / "results"))
    args = ap.parse_args()

    for name in args.only:
        base = load_config(ROOT / "configs" / f"{name}.cfg", env={})
        t0 = time.perf_counter()
        rows = {}
        finals = []
        for seed in args.seeds:
            cfg = replace(base, seed=seed, output=str(Path(args.out) / f"{name}_seed{seed}.csv"),
                          checkpoint=None)
            res = run_scenario(cfg)
            for r in res.summary:
                rows.setdefault(r.scheme, []).append((r.bce, r.accuracy))
            fed = res.history.select("fedavg_dp" if name == "dp" else "fedavg")
            if fed:
                finals.append(fed[-1].accuracy)
        print(f"\n{name}: {len(args.seeds)} seeds, {time.perf_counter() - t0:.0f}s")
        print(f"{'Training Scheme':<28}{'BCE':>10}{'Accuracy':>10}")
        for scheme, vals in rows.items():
            bce, acc = np.mean(vals, axis=0)
            print(f"{LABELS[scheme]:<28}{bce:>10.4f}{acc:>10.4f}")
        if finals:
            print(f"final-round federated accuracy {np.mean(finals):.4f}")


if __name__ == "__main__":
    main()
