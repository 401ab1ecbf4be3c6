"""DeGroot iteration on lazy rings of growing size versus one-shot uniform averaging.

    python3 scripts/consensus_demo.py --sizes 3 4 8 16 --steps 200
"""
import argparse

import numpy as np

from fedvol.consensus import consensus_apply, eigenvalues, lazy_ring, uniform_matrix


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--sizes", type=int, nargs="+", default=[3, 4, 8, 16])
    ap.add_argument("--steps", type=int, default=200)
    ap.add_argument("--dim", type=int, default=16)
    args = ap.parse_args()

    rng = np.random.default_rng(0)
    print(f"{'n':>4}{'|lambda_2|':>12}{'uniform, 1 step':>18}{'ring, k steps':>16}")
    for n in args.sizes:
        x = rng.normal(size=(n, args.dim))
        mean = x.mean(axis=0)
        one = np.max(np.abs(consensus_apply(uniform_matrix(n), x) - mean))
        A = lazy_ring(n)
        y = x
        for _ in range(args.steps):
            y = consensus_apply(A, y)
        lam2 = np.sort(np.abs(eigenvalues(A)))[-2]
        print(f"{n:>4}{lam2:>12.4f}{one:>18.2e}{np.max(np.abs(y - mean)):>16.2e}")


if __name__ == "__main__":
    main()
