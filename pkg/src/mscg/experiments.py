"""Experiment runners behind the command line subcommands.

Every runner takes a config section, a seed, an output directory and a worker
count, writes CSV/text artifacts and returns a summary dict.
"""
from __future__ import annotations

import csv
import json
import logging
import time
from pathlib import Path
from typing import Optional

import numpy as np

from . import config as C
from .adjoint_opt import (gauss_legendre_interval, mvr_statistics, optimize_deterministic,
                          optimize_robust_frequency, optimize_robust_geometry)
from .global_solver import export_fields, l2_error, qoi_power, solve_problem, write_error_table
from .mapping import GeometryParams, KlModel
from .problems import (CrystalSpec, Planewave, bend_core, bend_design_model, crystal_problem,
                       crystal_templates, dof_counts, lattice3_design_model, line_defect_core,
                       planewave_problem, row_amplitude)
from .reduced_basis import build_reduced_model, load_reduced, save_reduced
from .rng import uniform_rows
from .uq import (StochasticSpace, crude_mc_values, mvr_expectation, mvr_variance,
                 sample_params)

log = logging.getLogger(__name__)

# batch ids of the independent random streams
BATCH_TRAIN = 10
BATCH_VALID = 11
BATCH_SAA = 12
BATCH_HOLDOUT = 13


def _out(out) -> Path:
    p = Path(out)
    p.mkdir(parents=True, exist_ok=True)
    return p


def write_csv(path, rows, header) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow([f"{v:.6e}" if isinstance(v, float) else v for v in (r[h] for h in header)])


def crystal_spec(cc: C.CrystalConfig) -> CrystalSpec:
    return CrystalSpec(R0=cc.R0, eps_rod=cc.eps_rod, eps_bg=cc.eps_bg, order=cc.order, h=cc.h,
                       pml_sigma=cc.pml_sigma, face_order=cc.face_order)


def kl_model(kc: C.KlConfig, R0: float) -> KlModel:
    return KlModel.from_total(kc.n_coeffs, kc.sigma, kc.Lc, R0)


# --------------------------------------------------------------------------
# convergence
# --------------------------------------------------------------------------


def observed_orders(errors) -> list:
    e = np.asarray(errors, dtype=float)
    return [float("nan")] + list(np.log2(e[:-1] / e[1:]))


def run_convergence(cfg: C.ConvergenceConfig, out, workers: int = 1) -> dict:
    out = _out(out)
    pw = Planewave(cfg.k, cfg.angle)
    table = {}
    dof_rows = []
    for p in cfg.p:
        rows = []
        for q in cfg.q:
            errs, ns = [], []
            for n in cfg.n:
                if n % q:
                    log.warning("skipping n=%d, q=%d: q does not divide n", n, q)
                    continue
                pb = planewave_problem(n, p, q, pw, diagonal=cfg.diagonal, cap=cfg.face_cap)
                sol = solve_problem(pb, workers=workers)
                errs.append(l2_error(sol, pw.exact))
                ns.append(n)
                d = dof_counts(n, p, q, cfg.face_cap)
                dof_rows.append(dict(n=n, q=q, p=p, pf=d["pf"], local=d["local"],
                                     skeleton=d["skeleton"], cg=d["cg"]))
            for n, e, o in zip(ns, errs, observed_orders(errs)):
                rows.append(dict(n=n, q=q, p=p, error=e, order=o))
            table[(p, q)] = dict(zip(ns, errs))
        write_error_table(rows, out / f"errors_p{p}.csv")
    write_csv(out / "dofs.csv", dof_rows, ["n", "q", "p", "pf", "local", "skeleton", "cg"])
    return dict(errors=table, dofs=dof_rows)


# --------------------------------------------------------------------------
# simulate
# --------------------------------------------------------------------------


def simulate_layout(cfg: C.SimulateConfig):
    """(core, source cell, output cell, output direction) for the configured layout."""
    n = cfg.n
    mid = n // 2
    if cfg.layout == "line_defect":
        return line_defect_core(n), (mid, 0), (mid, n - 1), (1.0, 0.0)
    if cfg.layout == "bend":
        core, _, src, outc = bend_core(n)
        return core, src, outc, (0.0, 1.0)
    if cfg.layout == "empty":
        return [["defect"] * n for _ in range(n)], (mid, 0), (mid, n - 1), (1.0, 0.0)
    raise C.ConfigError(f"unknown layout {cfg.layout!r}")


def run_simulate(cfg: C.SimulateConfig, out, workers: int = 1) -> dict:
    out = _out(out)
    cs = crystal_spec(cfg.crystal)
    T = crystal_templates(cs)
    core, src, outc, direction = simulate_layout(cfg)
    n = cfg.n
    mid = n // 2
    rows, prof_rows = [], []
    for f in cfg.frequencies:
        omega = 2 * np.pi * f
        cp = crystal_problem(core, omega, src, cs, templates=T, polarization=cfg.polarization)
        sol = solve_problem(cp.problem, workers=workers)
        P = qoi_power(sol, [cp.instance_at(*outc)], direction)
        rows.append(dict(frequency=float(f), omega=omega, power=P))
        cols = range(2, n - 2)
        for r in range(n):
            prof_rows.append(dict(frequency=float(f), row=r - mid,
                                  amplitude=row_amplitude(sol, cp, r, cols)))
        if cfg.export_fields:
            export_fields(sol, out / f"fields_f{f:.4f}")
    write_csv(out / "power.csv", rows, ["frequency", "omega", "power"])
    write_csv(out / "row_amplitude.csv", prof_rows, ["frequency", "row", "amplitude"])
    return dict(power=rows, profile=prof_rows)


def bandgap_ratio(profile_rows, frequency: float, offset: int = 2) -> float:
    """On-axis amplitude over the larger amplitude `offset` rows off-axis."""
    amp = {r["row"]: r["amplitude"] for r in profile_rows if r["frequency"] == frequency}
    return amp[0] / max(amp[offset], amp[-offset])


# --------------------------------------------------------------------------
# reduced basis training
# --------------------------------------------------------------------------


def rod_training_set(cfg: C.RbTrainConfig, kl: Optional[KlModel], seed: int) -> list:
    lo, hi = cfg.theta_box
    if cfg.family == "theta":
        rows = uniform_rows(seed, BATCH_TRAIN, 0, cfg.n_train, np.array([lo]), np.array([hi]))
        return [GeometryParams()] + [GeometryParams(float(r[0])) for r in rows]
    if cfg.family != "kl":
        raise C.ConfigError(f"unknown training family {cfg.family!r}")
    hw = cfg.kl.half_width
    D = kl.n_coeffs
    rows = uniform_rows(seed, BATCH_TRAIN, 0, cfg.n_train, np.r_[lo, -hw * np.ones(D)],
                        np.r_[hi, hw * np.ones(D)])
    return [GeometryParams(0.0, np.zeros(D), kl)] + [GeometryParams(float(r[0]), r[1:], kl)
                                                     for r in rows]


def bend_setup(n: int, cc: C.CrystalConfig, kc: Optional[C.KlConfig], frequency: float,
               random: bool = True):
    cs = crystal_spec(cc)
    kl = kl_model(kc, cs.R0) if kc is not None else None
    dm, cp = bend_design_model(n, 2 * np.pi * frequency, cs=cs, kl=kl, random=random)
    return dm, cp, kl


def rod_edge_layout(cp):
    lay = cp.problem.layout
    m = next(i for i, inst in enumerate(lay.instances) if inst.template == "rod")
    return cp.templates["rod"], cp.problem.skeleton.instance_edges[m]


def bend_space(dm, kc: C.KlConfig) -> StochasticSpace:
    return StochasticSpace({s: np.full(dm.kl.n_coeffs, kc.half_width)
                            for s in dm.random_slots}, dm.kl)


def run_rb_train(cfg: C.RbTrainConfig, seed: int, out, workers: int = 1) -> dict:
    out = _out(out)
    fam_kl = cfg.family == "kl"
    fmid = float(np.mean(cfg.frequencies))
    dm, cp, kl = bend_setup(cfg.n, cfg.crystal, cfg.kl if fam_kl else None, fmid, fam_kl)
    rod, le = rod_edge_layout(cp)
    train = rod_training_set(cfg, kl, seed)
    t0 = time.perf_counter()
    model = build_reduced_model(rod, le, train, [2 * np.pi * f for f in cfg.frequencies],
                                cfg.N_max, cp.problem.polarization, cfg.deim_tol, kl=kl,
                                meta=dict(seed=int(seed), family=cfg.family))
    t_off = time.perf_counter() - t0
    save_reduced(model, out / cfg.file)
    sig = model.sigma / model.sigma[0]
    write_csv(out / "pod_spectrum.csv",
              [dict(k=k + 1, ratio=float(s)) for k, s in enumerate(sig)], ["k", "ratio"])
    report = dict(Q=model.Q, K=model.K, N_max=model.N_max, offline_seconds=t_off,
                  n_train=len(train), seed=int(seed))
    if cfg.n_validation > 0:
        val = rb_validation(dm, model, cfg, seed, fmid)
        write_csv(out / "rb_validation.csv", val["rows"],
                  ["N", "mean_rel_error", "max_rel_error", "seconds_rb", "seconds_full"])
        report["validation"] = val["rows"]
        report["N_star"] = val["N_star"]
    (out / "rb_report.json").write_text(json.dumps(report, indent=2, sort_keys=True))
    return dict(model=model, report=report)


def spectrum_index(model, ratio: float = 1e-6) -> Optional[int]:
    """Smallest N with sigma_{N+1} / sigma_1 < ratio (None when not reached)."""
    r = model.sigma / model.sigma[0]
    hit = np.nonzero(r < ratio)[0]
    if not len(hit):
        return None
    return int(max(hit[0], 1))


def validation_draws(dm, cfg: C.RbTrainConfig, seed: int, count: int) -> np.ndarray:
    lo, hi = cfg.theta_box
    nd = len(dm.design_slots)
    nz = len(dm.random_slots) * (dm.kl.n_coeffs if dm.kl else 0)
    hw = cfg.kl.half_width
    return uniform_rows(seed, BATCH_VALID, 0, count, np.r_[lo * np.ones(nd), -hw * np.ones(nz)],
                        np.r_[hi * np.ones(nd), hw * np.ones(nz)])


def rb_validation(dm, model, cfg: C.RbTrainConfig, seed: int, frequency: float) -> dict:
    omega = 2 * np.pi * frequency
    nd = len(dm.design_slots)
    draws = validation_draws(dm, cfg, seed, cfg.n_validation)
    z = (lambda v: v[nd:] if len(v) > nd else None)
    t0 = time.perf_counter()
    sh = np.array([dm.value(v[:nd], omega, z(v)) for v in draws])
    t_full = (time.perf_counter() - t0) / len(draws)
    Ns = sorted({N for N in cfg.validation_N if 1 <= N <= model.N_max})
    Nst = spectrum_index(model)
    if Nst is not None and Nst <= model.N_max and Nst not in Ns:
        Ns = sorted(Ns + [Nst])
    rows = []
    for N in Ns:
        dm.reduced = {"rod": (model, N)}
        dm._caches.clear()
        t0 = time.perf_counter()
        sN = np.array([dm.value(v[:nd], omega, z(v), rb=True) for v in draws])
        t_rb = (time.perf_counter() - t0) / len(draws)
        e = np.abs(sN - sh) / np.abs(sh)
        rows.append(dict(N=N, mean_rel_error=float(e.mean()), max_rel_error=float(e.max()),
                         seconds_rb=t_rb, seconds_full=t_full))
    dm.reduced = {}
    return dict(rows=rows, N_star=Nst, s_h=sh)


# --------------------------------------------------------------------------
# uq
# --------------------------------------------------------------------------


def synthetic_pair(rho: float = 0.95):
    """Correlated analytic pair on a 4-dimensional uniform box."""
    c = np.array([1.0, 0.5, 0.25, 0.125])

    def s_h(z):
        return float(1.0 + c @ z + 0.1 * np.sin(3 * z[0]) * z[1])

    def s_N(z):
        return float(rho * (1.0 + c @ z))

    return s_h, s_N, StochasticSpace({0: np.ones(4)})


def _zero_model(z) -> float:
    return 0.0


def run_uq(cfg: C.UqConfig, seed: int, out, workers: int = 1) -> dict:
    out = _out(out)
    if cfg.model == "synthetic":
        s_h, s_N, space = synthetic_pair()
    elif cfg.model == "bend":
        dm, cp, kl = bend_setup(cfg.n, cfg.crystal, cfg.kl, cfg.frequency)
        space = bend_space(dm, cfg.kl)
        theta = np.full(len(dm.design_slots), cfg.theta)
        omega = 2 * np.pi * cfg.frequency
        if not cfg.zero_surrogate:
            model = load_reduced(Path(cfg.rb_file))
            dm.reduced = {"rod": (model, min(cfg.N, model.N_max))}

        def s_h(z):
            return dm.value(theta, omega, z)

        def s_N(z):
            return dm.value(theta, omega, z, rb=True)
    else:
        raise C.ConfigError(f"unknown uq model {cfg.model!r}")
    surrogate = _zero_model if cfg.zero_surrogate else s_N
    t0 = time.perf_counter()
    est = mvr_expectation(s_h, surrogate, space, cfg.M0, cfg.M1, seed, cfg.a, workers)
    var = mvr_variance(est)
    crude = crude_mc_values(est.values["sh0"], cfg.a)
    row = dict(mean=est.mean, half_width=est.half_width, var_corr=est.var_corr,
               var_surr=est.var_surr, variance=var.var, variance_half_width=var.half_width,
               crude_mean=crude.mean, crude_half_width=crude.half_width, M0=est.M0, M1=est.M1,
               seed=int(seed), seconds=time.perf_counter() - t0)
    write_csv(out / "mvr.csv", [row], list(row))
    return dict(estimate=est, variance=var, crude=crude, row=row)


# --------------------------------------------------------------------------
# optimize
# --------------------------------------------------------------------------


def optimize_model(cfg: C.OptimizeConfig, random: bool):
    if cfg.model == "bend":
        dm, cp, kl = bend_setup(cfg.n, cfg.crystal, cfg.kl if random else None, cfg.frequency,
                                random)
        return dm
    if cfg.model == "lattice3":
        kl = kl_model(cfg.kl, 0.2) if random else None
        return lattice3_design_model(2 * np.pi * cfg.frequency, kl=kl)
    raise C.ConfigError(f"unknown optimization model {cfg.model!r}")


def saa_draws(space: StochasticSpace, seed: int, count: int) -> np.ndarray:
    return sample_params(space, seed, count, BATCH_SAA)


def run_optimize(cfg: C.OptimizeConfig, seed: int, out, workers: int = 1) -> dict:
    out = _out(out)
    geometric = cfg.objective == "geometry"
    dm = optimize_model(cfg, geometric)
    d = len(dm.design_slots)
    lo = np.full(d, cfg.box[0])
    hi = np.full(d, cfg.box[1])
    x0 = None
    if cfg.warm_start:
        x0 = np.loadtxt(cfg.warm_start, ndmin=1)
        if x0.shape != (d,):
            raise C.ConfigError(f"warm start must hold {d} values")
    kw = dict(n_starts=cfg.n_starts, seed=seed, x0=x0, maxiter=cfg.maxiter)
    extra = {}
    if cfg.objective == "deterministic":
        om = 2 * np.pi * cfg.frequency
        res = optimize_deterministic(lambda th: dm.value_grad(th, om), lo, hi, **kw)
    elif cfg.objective == "frequency":
        iv = (2 * np.pi * cfg.interval[0], 2 * np.pi * cfg.interval[1])
        res = optimize_robust_frequency(lambda th, om: dm.value_grad(th, om), iv, lo, hi,
                                        cfg.gamma, cfg.n_quad, workers=workers, **kw)
    elif geometric:
        model = load_reduced(Path(cfg.rb_file))
        dm.reduced = {"rod": (model, min(cfg.N, model.N_max))}
        space = bend_space(dm, cfg.kl) if cfg.model == "bend" else StochasticSpace(
            {s: np.full(dm.kl.n_coeffs, cfg.kl.half_width) for s in dm.random_slots}, dm.kl)
        draws = saa_draws(space, seed, cfg.n_draws)
        iv = (2 * np.pi * cfg.interval[0], 2 * np.pi * cfg.interval[1])
        res = optimize_robust_geometry(lambda th, om, z: dm.value_grad(th, om, z, rb=True), iv,
                                       lo, hi, draws, cfg.gamma, cfg.n_quad, workers=workers, **kw)
        stats = mvr_statistics(lambda th, om, z: dm.value(th, om, z),
                               lambda th, om, z: dm.value(th, om, z, rb=True), res.x, space, iv,
                               cfg.n_quad, cfg.M0, cfg.M1, seed)
        obj = stats.mean - cfg.gamma * np.sqrt(stats.var + 1e-12)
        hw = stats.mean_half_width + cfg.gamma * stats.var_half_width / (
            2 * np.sqrt(stats.var + 1e-12))
        hist = res.history
        gain = hist[-1]["objective"] - hist[0]["objective"] if hist else 0.0
        extra = dict(mvr_mean=stats.mean, mvr_var=stats.var, mvr_objective=obj,
                     mvr_half_width=hw, mean_half_width=stats.mean_half_width,
                     var_half_width=stats.var_half_width,
                     indistinguishable=bool(abs(gain) < hw))
        if extra["indistinguishable"]:
            log.warning("objective gain %.3e is within the MVR half-width %.3e", gain, hw)
    else:
        raise C.ConfigError(f"unknown objective {cfg.objective!r}")
    write_csv(out / "history.csv", res.history,
              ["iter", "objective", "grad_norm", "step", "active_set_size"])
    np.savetxt(out / "theta.txt", res.x, fmt="%.12e")
    summary = dict(objective=res.value, pg_norm=res.pg_norm, success=res.success,
                   n_active=int(res.active_lower.sum() + res.active_upper.sum()), **extra)
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    return dict(result=res, summary=summary)


def heldout_variance(dm, theta, space, interval, n_quad: int, seed: int, count: int,
                     rb: bool = True) -> tuple[float, float]:
    """(E, V) of s over frequency nodes x held-out geometry draws."""
    nodes, w = gauss_legendre_interval(interval[0], interval[1], n_quad)
    draws = sample_params(space, seed, count, BATCH_HOLDOUT)
    vals = np.array([[dm.value(theta, om, z, rb=rb) for z in draws] for om in nodes])
    ww = np.repeat(w, count) / count
    E = float(ww @ vals.ravel())
    return E, float(ww @ (vals.ravel() - E) ** 2)


def robust_comparison(dm, space, interval, box, gamma: float = 1.0, n_quad: int = 3,
                      n_draws: int = 8, n_holdout: int = 30, seed: int = 0, n_starts: int = 2,
                      maxiter: int = 20, workers: int = 1) -> dict:
    """Frequency-robust optimum theta_hat vs geometry-robust optimum theta_tilde.

    Both designs are scored by (E, V) over the frequency nodes and a held-out
    geometry sample that neither optimization saw. `dm.reduced` must be set.
    """
    d = len(dm.design_slots)
    lo, hi = np.full(d, box[0]), np.full(d, box[1])
    kw = dict(n_starts=n_starts, seed=seed, maxiter=maxiter)
    hat = optimize_robust_frequency(lambda th, om: dm.value_grad(th, om), interval, lo, hi,
                                    gamma, n_quad, workers=workers, **kw)
    draws = saa_draws(space, seed, n_draws)
    tilde = optimize_robust_geometry(lambda th, om, z: dm.value_grad(th, om, z, rb=True),
                                     interval, lo, hi, draws, gamma, n_quad, workers=workers,
                                     **kw)
    out = dict(theta_hat=hat.x, theta_tilde=tilde.x, freq=hat, geom=tilde)
    for name, th in (("hat", hat.x), ("tilde", tilde.x)):
        E, V = heldout_variance(dm, th, space, interval, n_quad, seed + 1, n_holdout)
        out[f"E_{name}"], out[f"V_{name}"] = E, V
    return out
