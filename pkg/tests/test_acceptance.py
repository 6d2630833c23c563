"""Acceptance criteria 1-11.

Every test records one PASS/FAIL line (printed in the terminal summary) before
asserting, so a full run lists all criteria even when some fail.
"""
import numpy as np
import pytest

from mscg import config as C
from mscg import experiments as X
from mscg.adjoint_opt import adjoint_gradient
from mscg.geometry import EdgeLayout
from mscg.global_solver import l2_error, recover_field, solve_problem
from mscg.local_solver import assemble_matrix
from mscg.mapping import GeometryParams, KlModel, mesh_map_fields
from mscg.problems import (Planewave, dof_counts, lattice3_design_model, lattice3_templates,
                           planewave_problem)
from mscg.reduced_basis import build_reduced_model
from mscg.uq import (BATCH_M0, allocate_samples, crude_mc, crude_mc_values, mvr_expectation,
                     sample_params)
from oracles import cg_solve, physical_assembly

from conftest import record

NS = [8, 16, 32, 64, 128]
QS = [1, 2, 4, 8]
TABLE_ERR = {1: [2.80e-2, 7.63e-3, 1.96e-3, 4.92e-4, 1.23e-4],
             2: [6.23e-4, 7.55e-5, 9.38e-6, 1.17e-6, 1.46e-7]}
TABLE_ORD = {1: [1.86, 1.97, 1.99, 2.00], 2: [3.04, 3.01, 3.00, 3.00]}
# n -> {q: (local, skeleton)}, monolithic CG count last
TABLE_DOF = {8: ({2: (81, 93), 4: (25, 145), 8: (9, 225)}, 289),
             16: ({2: (289, 117), 4: (81, 305), 8: (25, 513)}, 1089),
             32: ({2: (1089, 117), 4: (289, 385), 8: (81, 1089)}, 4225),
             64: ({2: (4225, 117), 4: (1089, 385), 8: (289, 1377)}, 16641),
             128: ({2: (16641, 117), 4: (4225, 385), 8: (1089, 1377)}, 66049)}
KL_ACC = dict(D=10, sigma=0.02, Lc=1.0 / 16.0)  # 11 coefficients
THETA_BOX = (-0.127, 0.047)


def _sig3(x):
    return f"{x:.2e}"


def _convergence(p):
    pw = Planewave()
    errs = {}
    for q in QS:
        errs[q] = [l2_error(solve_problem(planewave_problem(n, p, q, pw)), pw.exact)
                   for n in NS]
    return errs


def _check_table(crit, p):
    errs = _convergence(p)
    bad = []
    for q, e in errs.items():
        for n, got, ref in zip(NS, e, TABLE_ERR[p]):
            if _sig3(got) != _sig3(ref):
                bad.append(f"q={q} n={n}: {got:.3e} vs {ref:.2e}")
        orders = X.observed_orders(e)[1:]
        for n, o, ref in zip(NS[1:], orders, TABLE_ORD[p]):
            if abs(o - ref) > 0.05:
                bad.append(f"q={q} n={n}: order {o:.3f} vs {ref:.2f}")
    e1 = ", ".join(f"{x:.3e}" for x in errs[1])
    ok = not bad
    record(crit, ok, f"p={p} errors(q=1) [{e1}]; {len(bad)} mismatches"
           + (f", first: {bad[0]}" if bad else ""))
    assert ok, "\n".join(bad)


@pytest.mark.slow
def test_criterion_01_convergence_p1():
    _check_table(1, 1)


@pytest.mark.slow
def test_criterion_02_convergence_p2():
    _check_table(2, 2)


def test_criterion_03_dof_table():
    bad = []
    for n, (per_q, cg) in TABLE_DOF.items():
        for q, (nl, ng) in per_q.items():
            d = dof_counts(n, 2, q)
            pb = planewave_problem(n, 2, q)
            built_l = pb.layout.template_of(pb.layout.instances[0]).mesh.n_nodes
            got = (d["local"], d["skeleton"], built_l, pb.skeleton.n_dofs)
            if got != (nl, ng, nl, ng):
                bad.append(f"n={n} q={q}: {got} vs {(nl, ng)}")
            if d["cg"] != cg:
                bad.append(f"n={n}: CG {d['cg']} vs {cg}")
    ok = not bad
    record(3, ok, f"{sum(len(v[0]) for v in TABLE_DOF.values())} table entries, "
           f"{len(bad)} mismatches")
    assert ok, bad


def _nodal_field(sol):
    """Global node coordinates (rounded) -> value over all cells."""
    lay = sol.problem.layout
    out = {}
    for m, inst in enumerate(lay.instances):
        x = lay.to_global(inst, lay.template_of(inst).mesh.nodes)
        u = recover_field(sol, m)
        for (a, b), v in zip(np.round(x, 10), u):
            out[(a, b)] = v
    return out


def test_criterion_04_mscg_cg_equivalence():
    pw = Planewave()
    worst_q, worst_cg = 0.0, 0.0
    # uncapped face order np/q <= 16: the skeleton space is the CG trace space and the
    # single-element face interpolation stays well conditioned
    for p, n in ((1, 16), (2, 8)):
        ref = _nodal_field(solve_problem(planewave_problem(n, p, 1, pw, cap=n * p)))
        keys = list(ref)
        r = np.array([ref[k] for k in keys])
        for q in (2, 4, 8):
            f = _nodal_field(solve_problem(planewave_problem(n, p, q, pw, cap=n * p)))
            u = np.array([f[k] for k in keys])
            worst_q = max(worst_q, np.linalg.norm(u - r) / np.linalg.norm(r))
        sol = solve_problem(planewave_problem(n, p, 1, pw, cap=n * p))
        mesh = sol.problem.layout.template_of(sol.problem.layout.instances[0]).mesh
        shift = (lambda fn: (lambda x, y: fn(x + 0.5, y + 0.5)))  # noqa: E731
        u_cg, err_cg = cg_solve(mesh, 1.0, shift(pw.source), shift(pw.exact))
        u1 = recover_field(sol, 0)
        worst_cg = max(worst_cg, np.linalg.norm(u1 - u_cg) / np.linalg.norm(u_cg),
                       abs(l2_error(sol, pw.exact) - err_cg) / err_cg)
    ok = worst_q < 1e-9 and worst_cg < 1e-9
    record(4, ok, f"max q-variation {worst_q:.1e}, max q=1 vs CG {worst_cg:.1e} (tol 1e-9)")
    assert ok


def test_criterion_05_mapping_assembly(rod_template):
    kl = KlModel(**KL_ACC)
    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(20):
        p = GeometryParams(rng.uniform(*THETA_BOX), rng.uniform(-3 ** 0.5, 3 ** 0.5,
                                                                kl.n_coeffs), kl)
        mf = mesh_map_fields(rod_template, p)
        K = assemble_matrix(rod_template.mesh, mf.G, None).toarray()
        M = assemble_matrix(rod_template.mesh, None, mf.g).toarray()
        Kp, Mp = (A.toarray() for A in physical_assembly(rod_template, p))
        worst = max(worst, np.linalg.norm(K - Kp) / np.linalg.norm(Kp),
                    np.linalg.norm(M - Mp) / np.linalg.norm(Mp))
    ok = worst < 1e-10
    record(5, ok, f"max Frobenius relative difference {worst:.1e} over 20 draws (tol 1e-10)")
    assert ok


def test_criterion_06_kl_band():
    kl = KlModel(**KL_ACC)
    rng = np.random.default_rng(6)
    z = rng.uniform(-3 ** 0.5, 3 ** 0.5, (100_000, kl.n_coeffs))
    alpha = np.linspace(-np.pi, np.pi, 128, endpoint=False)
    c, _ = kl.basis(alpha)
    rel = np.abs(z @ c.T)  # |dR0| / R0 at every angle
    band = float(np.quantile(rel, 0.95, axis=0).max())
    ok = band < 0.03
    record(6, ok, f"pointwise 95% band of |dR0|/R0 = {100 * band:.2f}% (tol 3%)")
    assert ok


def _fd_errors(dm, th, z, omega, n, rb):
    sol = dm.solve(th, omega, z, rb=rb)
    res = adjoint_gradient(sol, dm.outputs, dm.direction)
    worst = 0.0
    for slot in (0, 1):
        for k in range(n + 1):
            def val(d):
                t2, z2 = th.copy(), z.copy()
                if k == 0:
                    t2[slot] += d
                else:
                    z2[slot * n + k - 1] += d
                return dm.value(t2, omega, z2, rb=rb)

            g = res.grad[slot][k]
            best = min(abs((val(h) - val(-h)) / (2 * h) - g) / abs(g)
                       for h in 10.0 ** -np.arange(3, 8))
            worst = max(worst, best)
    return worst, res.n_solves


@pytest.mark.slow
def test_criterion_07_adjoint_gradients():
    kl = KlModel(D=4, sigma=0.02, Lc=1.0 / 16.0)
    T = lattice3_templates()
    dm = lattice3_design_model(kl=kl, templates=T)
    omega = dm.base.omega
    rng = np.random.default_rng(11)
    th = np.array([0.02, -0.05])
    z = rng.uniform(-1, 1, 2 * kl.n_coeffs)
    e_full, s_full = _fd_errors(dm, th, z, omega, kl.n_coeffs, False)
    le = EdgeLayout(((10, 1),) * 4)
    train = [GeometryParams(rng.uniform(*THETA_BOX), rng.uniform(-3 ** 0.5, 3 ** 0.5,
                                                                 kl.n_coeffs), kl)
             for _ in range(30)]
    model = build_reduced_model(T["rod"], le, [GeometryParams(0.0, np.zeros(kl.n_coeffs), kl)]
                                + train, [omega], N_max=80, kl=kl)
    dm.reduced = {"rod": (model, model.N_max)}
    e_rb, s_rb = _fd_errors(dm, th, z, omega, kl.n_coeffs, True)
    ok = e_full < 1e-5 and e_rb < 1e-5 and s_full == 1 and s_rb == 1
    record(7, ok, f"max rel FD error full {e_full:.1e}, RB {e_rb:.1e} (tol 1e-5); "
           f"adjoint solves per gradient {s_full}/{s_rb}")
    assert ok


@pytest.fixture(scope="module")
def bend_rb(tmp_path_factory):
    out = tmp_path_factory.mktemp("rb")
    cfg = C.RbTrainConfig(validation_N=[10, 20, 40, 60, 80, 100, 150, 200, 250, 300])
    res = X.run_rb_train(cfg, 0, out)
    return res, cfg


@pytest.mark.slow
def test_criterion_08_rb_accuracy(bend_rb):
    res, _ = bend_rb
    rep = res["report"]
    rows = rep["validation"]
    errs = [r["mean_rel_error"] for r in rows]
    Nst = rep["N_star"]
    at = next((r for r in rows if r["N"] == Nst), None)
    mono = all(b <= a for a, b in zip(errs, errs[1:]))
    ok = mono and at is not None and at["mean_rel_error"] < 1e-3
    speed = ", ".join(f"N={r['N']}: {r['seconds_full'] / r['seconds_rb']:.1f}x" for r in rows
                      if r["N"] in (100, Nst))
    record(8, ok, f"monotone={mono}; N*={Nst}, mean rel error "
           f"{at['mean_rel_error'] if at else float('nan'):.1e} (tol 1e-3); "
           f"speedup (informational) {speed}")
    assert ok


def test_criterion_09_mvr():
    s_h, s_N, space = X.synthetic_pair()
    # (a) zero surrogate: bitwise crude MC on the shared M0 draws
    est0 = mvr_expectation(s_h, lambda z: 0.0, space, 50, 20, seed=9)
    mc0 = crude_mc(s_h, sample_params(space, 9, 50, BATCH_M0))
    ok_a = est0.mean == mc0.mean and est0.half_width == mc0.half_width
    # (b) coverage; E[s_h] = 1 exactly (all non-constant terms have zero mean)
    n_rep = 600
    M0, M1 = 10, 100
    means, hits = [], 0
    for r in range(n_rep):
        est = mvr_expectation(s_h, s_N, space, M0, M1, seed=10_000 + r)
        means.append(est.mean)
        hits += abs(est.mean - 1.0) <= est.half_width
    cover = hits / n_rep
    bias_z = abs(np.mean(means) - 1.0) / (np.std(means, ddof=1) / np.sqrt(n_rep))
    ok_b = 0.93 <= cover <= 0.97 and bias_z < 4.0
    # (c) matched cost: cost(MVR) = M0 (1 + 1/w) + M1 / w full solves, w = 100;
    # the split comes from pilot variances on an independent seed
    w, budget = 100.0, 40.0
    pilot = mvr_expectation(s_h, s_N, space, 20, 200, seed=77)
    A0, A1 = allocate_samples(pilot.var_corr, pilot.var_surr, w, budget=budget)
    cost = A0 * (1 + 1 / w) + A1 / w
    M_mc = int(round(cost))
    hw_mc = np.mean([crude_mc_values([s_h(z) for z in sample_params(space, 20_000 + r, M_mc)]
                                     ).half_width for r in range(200)])
    hw_mvr = np.mean([mvr_expectation(s_h, s_N, space, A0, A1, seed=30_000 + r).half_width
                      for r in range(200)])
    ratio = hw_mc / hw_mvr
    ok_c = ratio >= 3.0
    ok = ok_a and ok_b and ok_c
    record(9, ok, f"(a) bitwise={ok_a}; (b) coverage {cover:.3f} over {n_rep} reps, "
           f"bias z={bias_z:.2f}; (c) half-width reduction {ratio:.1f}x at cost {cost:.1f} "
           f"(M0={A0}, M1={A1})")
    assert ok


@pytest.mark.slow
def test_criterion_10_bandgap(tmp_path):
    cfg = C.SimulateConfig(layout="line_defect", frequencies=[0.38, 0.46])
    res = X.run_simulate(cfg, tmp_path)
    r_in = X.bandgap_ratio(res["profile"], 0.38)
    r_out = X.bandgap_ratio(res["profile"], 0.46)
    ok = r_in >= 10.0 and r_out < 10.0
    record(10, ok, f"on-axis / two-rows-off amplitude: in gap {r_in:.1f} (need >= 10), "
           f"out of gap {r_out:.1f} (need < 10)")
    assert ok


@pytest.mark.slow
def test_criterion_11_robust_ordering(bend_rb):
    res, cfg = bend_rb
    model = res["model"]
    dm, cp, kl = X.bend_setup(cfg.n, cfg.crystal, cfg.kl, 0.38)
    dm.reduced = {"rod": (model, X.spectrum_index(model))}
    space = X.bend_space(dm, cfg.kl)
    iv = (2 * np.pi * 0.375, 2 * np.pi * 0.385)
    out = X.robust_comparison(dm, space, iv, THETA_BOX, gamma=1.0, n_quad=3, n_draws=8,
                              n_holdout=30, seed=0)
    v_hat, v_tilde = out["V_hat"], out["V_tilde"]
    ok = v_tilde <= v_hat
    record(11, ok, f"held-out variance theta_tilde {v_tilde:.3e} vs theta_hat {v_hat:.3e}")
    assert ok
