"""L2 error and dof tables for the manufactured planewave problem."""
import argparse
import csv
from pathlib import Path

from mscg import config as C
from mscg import experiments as X


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", type=Path, default=Path("out/convergence"))
    ap.add_argument("--n", type=int, nargs="+", default=[8, 16, 32, 64, 128])
    ap.add_argument("--p", type=int, nargs="+", default=[1, 2])
    ap.add_argument("--workers", type=int, default=1)
    args = ap.parse_args()
    cfg = C.ConvergenceConfig(n=args.n, p=args.p)
    X.run_convergence(cfg, args.out, args.workers)
    for p in args.p:
        print(f"p = {p}")
        with open(args.out / f"errors_p{p}.csv") as fh:
            for row in csv.DictReader(fh):
                print(f"  q={row['q']:>2} n={row['n']:>4}  error {float(row['error']):.3e}"
                      f"  order {float(row['order']):.2f}")


if __name__ == "__main__":
    main()
