"""Adjoint gradients of the port power and the design drivers.

For a real output s of the complex multipliers, ds = Re(g^T dLambda). With
K Lambda = F, one transposed solve K^T psi = g gives

    ds/dp = Re(psi^T (dF/dp - dK/dp Lambda))

for every parameter p at once. Geometry parameters only touch the blocks of
the cells that carry them.
"""
from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.optimize import minimize
from scipy.stats import qmc

from .global_solver import (HelmholtzProblem, Solution, flux_matrix, port_power,
                            recover_field, solve_problem)
from .local_solver import BlockCache, assemble_matrix, material_coefficients
from .mapping import GeometryParams, KlModel, mesh_map_derivatives
from .reduced_basis import rb_block_derivative

log = logging.getLogger(__name__)

SQRT_EPS_V = 1e-12


# --------------------------------------------------------------------------
# adjoint
# --------------------------------------------------------------------------


@dataclass
class AdjointResult:
    value: float
    grad: dict  # slot -> d s / d (theta, z_1, ..., z_D)
    psi: np.ndarray
    n_solves: int
    port_powers: np.ndarray


def full_block_derivative(blk, template, params: GeometryParams, omega: float,
                          polarization: str, k: int, degree: Optional[int] = None) -> np.ndarray:
    """dK^m / dparam_k = U^T dA U from closed-form map derivatives."""
    d = mesh_map_derivatives(template, params, k, degree)
    rho, k2 = material_coefficients(template, omega, polarization)
    dA = assemble_matrix(template.mesh, rho[:, None, None, None] * d.G, -(k2[:, None] * d.g),
                         degree)
    U = blk.basis()
    return U.T @ (dA @ U)


def block_derivative(blk, template, params, omega, polarization, k, degree=None):
    if blk.rb is not None:
        return rb_block_derivative(blk, template, params, omega, k)
    return full_block_derivative(blk, template, params, omega, polarization, k, degree)


def output_linearization(solution: Solution, outputs: Sequence[int], direction,
                         degree: Optional[int] = None):
    """(s, g_Lambda, P_i) with ds = Re(g_Lambda^T dLambda) for fixed output cells."""
    pb = solution.problem
    lay = pb.layout
    omega = pb.omega
    degree = pb.degree if degree is None else degree
    e = np.asarray(direction, dtype=float)
    e = e / np.linalg.norm(e)
    g = np.zeros(pb.skeleton.n_dofs, dtype=complex)
    powers = []
    for m in outputs:
        inst = lay.instances[m]
        if inst.slot is not None and not pb.instance_params(m).is_identity:
            raise ValueError("output cells must not carry geometry parameters")
        t = lay.template_of(inst)
        C = flux_matrix(t, pb.instance_params(m), lay.rotation_matrix(inst).T @ e, omega,
                        pb.polarization, degree)
        u = recover_field(solution, m)
        P = port_power(u, C)
        if abs(P) < 1e-12:
            log.info("port power of instance %d within 1e-12 of zero; sign taken as +1", m)
        sgn = 1.0 if P >= 0 else -1.0
        gu = 1j * ((C - C.T) @ np.conj(u)) * (sgn / (2 * omega))
        d = pb.skeleton.instance_dofs[m]
        np.add.at(g, d, solution.blocks[m].basis().T @ gu)
        powers.append(P)
    powers = np.array(powers)
    return float(np.sum(np.abs(powers)) / (2 * omega)), g, powers


def adjoint_gradient(solution: Solution, outputs: Sequence[int], direction,
                     slots: Optional[Sequence[int]] = None,
                     degree: Optional[int] = None,
                     components: Optional[Sequence[int]] = None) -> AdjointResult:
    """Gradient of s_h w.r.t. the (theta, z) entries of the given slots.

    `components` restricts the parameter indices (0 = theta); others stay zero.
    """
    pb = solution.problem
    lay = pb.layout
    fac = solution.factor
    if fac is None:
        raise ValueError("solution carries no skeleton factorization")
    degree = pb.degree if degree is None else degree
    s, g, powers = output_linearization(solution, outputs, direction, degree)
    before = fac.n_solves
    psi = np.zeros(pb.skeleton.n_dofs, dtype=complex)
    if len(fac.free):
        psi[fac.free] = fac.solve_free(g[fac.free], trans="T")
    n_adj = fac.n_solves - before
    slots = sorted(pb.params) if slots is None else list(slots)
    grad = {}
    dK_cache = {}
    for sl in slots:
        p = pb.params.get(sl, GeometryParams())
        grad[sl] = np.zeros(p.n_params)
    for m, inst in enumerate(lay.instances):
        if inst.slot not in grad:
            continue
        if pb.has_source(m):
            raise ValueError("geometry gradients need source-free parameterized cells")
        t = lay.template_of(inst)
        if not t.mappable:
            continue
        p = pb.instance_params(m)
        blk = solution.blocks[m]
        d = pb.skeleton.instance_dofs[m]
        lam = solution.Lam[d]
        ps = psi[d]
        for k in (range(p.n_params) if components is None else components):
            key = (id(blk), k)
            if key not in dK_cache:
                dK_cache[key] = block_derivative(blk, t, p, pb.omega, pb.polarization, k, degree)
            grad[inst.slot][k] += float(np.real(-ps @ (dK_cache[key] @ lam)))
    return AdjointResult(s, grad, psi, n_adj, powers)


# --------------------------------------------------------------------------
# design model
# --------------------------------------------------------------------------


@dataclass
class DesignModel:
    """s(theta; omega, z) on a fixed layout with design and random rod slots.

    Design slots take the scalings theta; random slots take KL coefficient
    blocks of length kl.n_coeffs from a draw row (ordered by slot id).
    """

    base: HelmholtzProblem
    design_slots: Sequence[int]
    outputs: Sequence[int]
    direction: tuple = (1.0, 0.0)
    random_slots: Sequence[int] = ()
    kl: Optional[KlModel] = None
    reduced: dict = field(default_factory=dict)
    _caches: dict = field(default_factory=dict, repr=False)
    n_solves: int = 0

    def params(self, theta, z: Optional[np.ndarray] = None) -> dict:
        theta = np.asarray(theta, dtype=float)
        out = dict(self.base.params)
        zs = {}
        if z is not None and len(self.random_slots):
            n = self.kl.n_coeffs
            for i, sl in enumerate(sorted(self.random_slots)):
                zs[sl] = np.asarray(z[i * n:(i + 1) * n], dtype=float)
        for sl in set(self.design_slots) | set(zs):
            th = float(theta[list(self.design_slots).index(sl)]) if sl in self.design_slots else 0.0
            zz = zs.get(sl)
            if zz is None and self.kl is not None:
                zz = np.zeros(self.kl.n_coeffs)
            out[sl] = GeometryParams(th, zz, self.kl if zz is not None else None)
        return out

    def problem(self, theta, omega: float, z=None, rb: bool = False) -> HelmholtzProblem:
        b = self.base
        return HelmholtzProblem(b.skeleton, omega, b.polarization, self.params(theta, z), b.source,
                                b.source_instances, b.dirichlet, b.neumann, b.degree,
                                dict(self.reduced) if rb else {})

    def _cache(self, omega: float, rb: bool) -> BlockCache:
        red = tuple(sorted((k, id(m), n) for k, (m, n) in self.reduced.items())) if rb else ()
        key = (float(omega), red)
        return self._caches.setdefault(key, BlockCache(self.base.degree))

    def solve(self, theta, omega: float, z=None, rb: bool = False) -> Solution:
        self.n_solves += 1
        return solve_problem(self.problem(theta, omega, z, rb), self._cache(omega, rb))

    def value(self, theta, omega: float, z=None, rb: bool = False) -> float:
        from .global_solver import qoi_power

        return qoi_power(self.solve(theta, omega, z, rb), self.outputs, self.direction)

    def value_grad(self, theta, omega: float, z=None, rb: bool = False):
        sol = self.solve(theta, omega, z, rb)
        res = adjoint_gradient(sol, self.outputs, self.direction, slots=self.design_slots,
                               components=[0])
        g = np.array([res.grad[sl][0] for sl in self.design_slots])
        return res.value, g


# --------------------------------------------------------------------------
# optimization
# --------------------------------------------------------------------------


@dataclass
class OptResult:
    x: np.ndarray
    value: float
    grad: np.ndarray
    pg_norm: float
    active_lower: np.ndarray
    active_upper: np.ndarray
    history: list
    starts: list
    success: bool
    extra: dict = field(default_factory=dict)


def projected_gradient_norm(x, g, lo, hi) -> float:
    return float(np.linalg.norm(np.clip(x + g, lo, hi) - x))


def _run_start(fg, x0, lo, hi, maxiter, gtol):
    hist = []
    last = {}

    def neg(x):
        v, g = fg(x)
        last["x"], last["v"], last["g"] = np.array(x), float(v), np.asarray(g, dtype=float)
        if not hist:
            hist.append(_record(0, x, v, g, 0.0))
        return -float(v), -np.asarray(g, dtype=float)

    def _record(it, x, v, g, step):
        act = int(np.sum((x <= lo + 1e-12) | (x >= hi - 1e-12)))
        return dict(iter=it, objective=float(v), grad_norm=projected_gradient_norm(x, g, lo, hi),
                    step=float(step), active_set_size=act)

    state = {"prev": np.clip(np.array(x0, dtype=float), lo, hi)}

    def cb(xk):
        v, g = last["v"], last["g"]
        if not np.array_equal(last["x"], xk):
            v, g = fg(xk)
        hist.append(_record(len(hist), xk, v, g, np.linalg.norm(xk - state["prev"])))
        state["prev"] = np.array(xk)

    bounds = list(zip(lo, hi))
    res = minimize(neg, np.clip(x0, lo, hi), jac=True, method="L-BFGS-B", bounds=bounds,
                   callback=cb, options=dict(maxiter=maxiter, gtol=gtol, ftol=1e-15))
    # status 1 (iteration limit) is a usable iterate; status 2 is a line-search failure
    ok = res.status != 2
    if not ok:
        # line search trouble: restart from the last iterate with a fresh memory
        log.info("line search failed from start %s; restarting", x0)
        res2 = minimize(neg, res.x, jac=True, method="L-BFGS-B", bounds=bounds, callback=cb,
                        options=dict(maxiter=maxiter, gtol=gtol, ftol=1e-15, maxls=50))
        if -res2.fun >= -res.fun:
            res = res2
        ok = res2.status != 2
    if not ok and hist:
        # rounding-level stall at a stationary point is convergence, not failure
        pg = projected_gradient_norm(res.x, -np.asarray(res.jac), lo, hi)
        ok = pg <= 1e-6 * max(hist[0]["grad_norm"], 1e-300)
    return res, hist, ok


def maximize_box(fg: Callable, lo, hi, n_starts: int = 8, seed: int = 0, x0=None,
                 maxiter: int = 200, gtol: float = 1e-10) -> OptResult:
    """Multistart projected quasi-Newton ascent over the box [lo, hi]."""
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))):
        raise ValueError("design box must be finite")
    d = len(lo)
    starts = []
    if x0 is not None:
        starts.append(np.asarray(x0, dtype=float))
    n_lhs = max(0, n_starts - len(starts))
    if n_lhs:
        pts = qmc.LatinHypercube(d=d, seed=seed).random(n_lhs)
        starts += list(qmc.scale(pts, lo, hi)) if d else [np.zeros(0)] * n_lhs
    best, runs = None, []
    for xs in starts:
        res, hist, ok = _run_start(fg, xs, lo, hi, maxiter, gtol)
        runs.append(dict(x0=xs, x=res.x, value=-float(res.fun), success=ok, history=hist))
        if best is None or -res.fun > -best[0].fun:
            best = (res, hist, ok)
    if best is None:
        raise RuntimeError("no optimization start")
    res, hist, ok = best
    if not any(r["success"] for r in runs):
        log.warning("all %d optimization starts reported failure", len(runs))
    g = -np.asarray(res.jac, dtype=float)
    x = res.x
    return OptResult(x=x, value=-float(res.fun), grad=g,
                     pg_norm=projected_gradient_norm(x, g, lo, hi),
                     active_lower=x <= lo + 1e-12, active_upper=x >= hi - 1e-12,
                     history=hist, starts=runs, success=ok)


def optimize_deterministic(fg: Callable, lo, hi, **kw) -> OptResult:
    """theta* = argmax s(theta) at one frequency; fg returns (s, ds/dtheta)."""
    return maximize_box(fg, lo, hi, **kw)


def gauss_legendre_interval(a: float, b: float, n: int):
    """Nodes and probability weights (summing to 1) on [a, b]."""
    x, w = np.polynomial.legendre.leggauss(n)
    return 0.5 * (a + b) + 0.5 * (b - a) * x, 0.5 * w


def robust_objective(values: np.ndarray, grads: np.ndarray, weights: np.ndarray, gamma: float):
    """E - gamma sqrt(V + eps) and its gradient from weighted samples."""
    values = np.asarray(values, dtype=float)
    grads = np.asarray(grads, dtype=float)
    E = float(weights @ values)
    V = float(weights @ (values - E) ** 2)
    dE = weights @ grads
    dV = 2.0 * (weights * (values - E)) @ grads
    sq = np.sqrt(V + SQRT_EPS_V)
    return E - gamma * sq, dE - gamma * dV / (2 * sq), E, V


def _ordered_map(fn, items, workers: int):
    """map preserving order, so reductions are independent of the thread count."""
    if workers > 1 and len(items) > 1:
        with ThreadPoolExecutor(workers) as ex:
            return list(ex.map(fn, items))
    return [fn(x) for x in items]


def optimize_robust_frequency(fg_omega: Callable, interval, lo, hi, gamma: float = 1.0,
                              n_quad: int = 5, workers: int = 1, **kw) -> OptResult:
    """theta_hat = argmax E_w[s] - gamma sqrt(V_w[s]) with Gauss-Legendre nodes in omega."""
    nodes, w = gauss_legendre_interval(interval[0], interval[1], n_quad)

    def fg(theta):
        out = _ordered_map(lambda om: fg_omega(theta, om), list(nodes), workers)
        obj, dobj, _, _ = robust_objective(np.array([o[0] for o in out]),
                                           np.array([o[1] for o in out]), w, gamma)
        return obj, dobj

    res = maximize_box(fg, lo, hi, **kw)
    vals = np.array([o[0] for o in _ordered_map(lambda om: fg_omega(res.x, om), list(nodes),
                                                  workers)])
    E = float(w @ vals)
    res.extra.update(E=E, V=float(w @ (vals - E) ** 2), nodes=nodes, weights=w)
    return res


def optimize_robust_geometry(fg_omega_z: Callable, interval, lo, hi, draws: np.ndarray,
                             gamma: float = 1.0, n_quad: int = 5, workers: int = 1,
                             **kw) -> OptResult:
    """theta_tilde = argmax of the sample-average E - gamma sqrt(V) over (omega, draws).

    The draw set is frozen (common random numbers) across all iterates.
    """
    draws = np.atleast_2d(draws)
    nodes, wq = gauss_legendre_interval(interval[0], interval[1], n_quad)
    M = len(draws)
    w = np.repeat(wq, M) / M

    def fg(theta):
        pairs = [(om, z) for om in nodes for z in draws]
        out = _ordered_map(lambda oz: fg_omega_z(theta, *oz), pairs, workers)
        obj, dobj, _, _ = robust_objective(np.array([o[0] for o in out]),
                                           np.array([o[1] for o in out]), w, gamma)
        return obj, dobj

    res = maximize_box(fg, lo, hi, **kw)
    res.extra.update(nodes=nodes, weights=wq, n_draws=M)
    return res


@dataclass
class RobustEstimate:
    mean: float
    var: float
    mean_half_width: float
    var_half_width: float
    per_node: list


def mvr_statistics(s_full: Callable, s_rb: Callable, theta, space, interval, n_quad: int,
                   M0: int, M1: int, seed: int, a: float = 1.96) -> RobustEstimate:
    """MVR estimates of E_{omega,G}[s] and V_{omega,G}[s] at a design."""
    from .uq import mvr_expectation, mvr_variance

    nodes, w = gauss_legendre_interval(interval[0], interval[1], n_quad)
    per = []
    for j, om in enumerate(nodes):
        est = mvr_expectation(lambda z: s_full(theta, om, z), lambda z: s_rb(theta, om, z),
                              space, M0, M1, seed + j, a)
        var = mvr_variance(est)
        per.append((est, var))
    E = float(sum(wj * e.mean for wj, (e, _) in zip(w, per)))
    V = float(sum(wj * (v.var + (e.mean - E) ** 2) for wj, (e, v) in zip(w, per)))
    hwE = float(np.sqrt(sum((wj * e.half_width) ** 2 for wj, (e, _) in zip(w, per))))
    hwV = float(np.sqrt(sum((wj * v.half_width) ** 2 for wj, (_, v) in zip(w, per))))
    return RobustEstimate(E, V, hwE, hwV, per)
