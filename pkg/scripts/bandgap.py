"""Line-defect amplitude profile in and out of the bandgap."""
import argparse
from pathlib import Path

from mscg import config as C
from mscg import experiments as X


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", type=Path, default=Path("out/bandgap"))
    ap.add_argument("--R0", type=float, default=0.4)
    ap.add_argument("--freq", type=float, nargs="+", default=[0.38, 0.46])
    ap.add_argument("--fields", action="store_true", help="export nodal fields")
    args = ap.parse_args()
    cfg = C.SimulateConfig(layout="line_defect", frequencies=args.freq,
                           export_fields=args.fields, crystal=C.CrystalConfig(R0=args.R0))
    res = X.run_simulate(cfg, args.out)
    for f in args.freq:
        print(f"f = {f:.3f}: on-axis / two rows off = {X.bandgap_ratio(res['profile'], f):.2f}")


if __name__ == "__main__":
    main()
