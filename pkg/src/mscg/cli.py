"""Command line driver: ``mscg {convergence,simulate,rb-train,uq,optimize}``.

Exit codes: 0 success, 2 configuration error, 3 solver failure.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
import time
from pathlib import Path

from numpy.linalg import LinAlgError

from . import config as C
from . import experiments as X
from .global_solver import GlobalResonanceError
from .local_solver import ResonanceError

log = logging.getLogger("mscg")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_SOLVER = 3

COMMANDS = ("convergence", "simulate", "rb-train", "uq", "optimize")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="mscg", description=__doc__.splitlines()[0])
    ap.add_argument("command", choices=COMMANDS)
    ap.add_argument("--config", type=Path, help="TOML experiment file")
    ap.add_argument("--seed", type=int, help="master seed (unsigned 64-bit)")
    ap.add_argument("--workers", type=int, help="thread count (default: available cores)")
    ap.add_argument("--out", type=Path, help="output directory")
    ap.add_argument("--set", dest="overrides", action="append", default=[],
                    metavar="KEY=VALUE", help="override one config key by dotted path")
    ap.add_argument("-v", "--verbose", action="store_true")
    return ap


class _ArgError(Exception):
    pass


def _parse(argv):
    ap = build_parser()
    ap.error = lambda msg: (_ for _ in ()).throw(_ArgError(msg))  # type: ignore[assignment]
    return ap.parse_args(argv)


def resolve_config(args) -> C.ExperimentConfig:
    cfg = C.load(args.config) if args.config else C.ExperimentConfig()
    cfg = C.apply_overrides(cfg, args.overrides)
    if args.seed is not None:
        if not 0 <= args.seed < 2 ** 64:
            raise C.ConfigError("seed must be an unsigned 64-bit integer")
        cfg.seed = args.seed
    if args.workers is not None:
        if args.workers < 1:
            raise C.ConfigError("workers must be positive")
        cfg.workers = args.workers
    if args.out is not None:
        cfg.out = str(args.out)
    return cfg


def run(cfg: C.ExperimentConfig, command: str) -> dict:
    workers = cfg.workers or os.cpu_count() or 1
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    C.save(cfg, out / "config.toml")
    log.info("%s: seed=%d workers=%d out=%s", command, cfg.seed, workers, out)
    t0 = time.perf_counter()
    if command == "convergence":
        res = X.run_convergence(cfg.convergence, out, workers)
    elif command == "simulate":
        res = X.run_simulate(cfg.simulate, out, workers)
    elif command == "rb-train":
        res = X.run_rb_train(cfg.rb_train, cfg.seed, out, workers)
    elif command == "uq":
        res = X.run_uq(cfg.uq, cfg.seed, out, workers)
    elif command == "optimize":
        res = X.run_optimize(cfg.optimize, cfg.seed, out, workers)
    else:
        raise C.ConfigError(f"unknown command {command!r}")
    log.info("%s finished in %.2f s", command, time.perf_counter() - t0)
    return res


def main(argv=None) -> int:
    try:
        args = _parse(sys.argv[1:] if argv is None else argv)
    except _ArgError as exc:
        print(f"mscg: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        run(cfg, args.command)
    except (ResonanceError, GlobalResonanceError, LinAlgError, ArithmeticError,
            RuntimeError) as exc:
        print(f"mscg: solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except (ValueError, FileNotFoundError) as exc:
        # includes GeometryError and malformed reduced-model files
        print(f"mscg: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
