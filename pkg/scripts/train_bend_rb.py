"""Offline reduced-basis training for the bend rods with validation sweep."""
import argparse
from pathlib import Path

from mscg import config as C
from mscg import experiments as X


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", type=Path, default=Path("out/rb"))
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--n-train", type=int, default=100)
    ap.add_argument("--n-validation", type=int, default=50)
    args = ap.parse_args()
    cfg = C.RbTrainConfig(n_train=args.n_train, n_validation=args.n_validation)
    rep = X.run_rb_train(cfg, args.seed, args.out)["report"]
    print(f"Q={rep['Q']} K={rep['K']} offline {rep['offline_seconds']:.1f} s, "
          f"N*={rep.get('N_star')}")
    for r in rep.get("validation", []):
        print(f"  N={r['N']:>4}  mean rel error {r['mean_rel_error']:.2e}  "
              f"speedup {r['seconds_full'] / r['seconds_rb']:.1f}x")


if __name__ == "__main__":
    main()
