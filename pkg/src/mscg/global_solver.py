"""Skeleton system assembly, solve, field recovery and outputs."""
from __future__ import annotations

import csv
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import LinearOperator, onenormest, splu

from . import fem
from .geometry import (EdgeLayout, SkeletonSpace, _edge_trace_l2, _face_basis,
                       trace_projection)
from .local_solver import (BlockCache, CondensedBlock, ResonanceError, material_coefficients,
                           solve_source, source_load)
from .mapping import GeometryParams, mesh_map_fields


class GlobalResonanceError(RuntimeError):
    def __init__(self, msg: str, condition: float = np.inf):
        super().__init__(msg)
        self.condition = condition


@dataclass
class HelmholtzProblem:
    """Everything needed to pose one MSCG solve on a skeleton.

    params: slot -> GeometryParams (instances without a slot use the identity map).
    source: f(x, y) in global coordinates; `source_instances` limits its support.
    dirichlet: u_D(x, y); neumann: h(x, y) on exterior Neumann faces.
    reduced: template name -> (ReducedModel, N); those cells use reduced blocks.
    """

    skeleton: SkeletonSpace
    omega: float
    polarization: str = "TM"
    params: dict = field(default_factory=dict)
    source: Optional[Callable] = None
    source_instances: Optional[Sequence[int]] = None
    dirichlet: Optional[Callable] = None
    neumann: Optional[Callable] = None
    degree: Optional[int] = None
    reduced: dict = field(default_factory=dict)

    @property
    def layout(self):
        return self.skeleton.layout

    def instance_params(self, m: int) -> GeometryParams:
        slot = self.layout.instances[m].slot
        if slot is not None and slot in self.params:
            return self.params[slot]
        return GeometryParams()

    def has_source(self, m: int) -> bool:
        if self.source is None:
            return False
        return self.source_instances is None or m in self.source_instances


@dataclass
class SkeletonSystem:
    K: sp.csr_matrix
    F: np.ndarray
    dirichlet_values: np.ndarray


@dataclass
class Solution:
    problem: HelmholtzProblem
    Lam: np.ndarray
    blocks: list
    uf: list
    system: Optional[SkeletonSystem] = None
    factor: Optional["SkeletonFactor"] = None

    def local_coeffs(self, m: int) -> np.ndarray:
        return self.Lam[self.problem.skeleton.instance_dofs[m]]


# --------------------------------------------------------------------------
# blocks and assembly
# --------------------------------------------------------------------------


def instance_blocks(problem: HelmholtzProblem, cache: Optional[BlockCache] = None,
                    workers: int = 1):
    """Condensed block, source response and local load for every instance.

    Cells without a parameter slot go through the shared `cache`; slotted cells
    are deduplicated within this call only, so design loops do not grow it.
    """
    cache = cache if cache is not None else BlockCache(problem.degree)
    local = BlockCache(problem.degree)
    sk = problem.skeleton
    lay = problem.layout
    M = lay.M

    def store(m):
        return local if lay.instances[m].slot is not None else cache

    def build(m):
        inst = lay.instances[m]
        t = lay.template_of(inst)
        c = store(m)
        if inst.template in problem.reduced:
            model, N = problem.reduced[inst.template]
            return c.get_reduced(model, t, problem.instance_params(m), problem.omega, N)
        return c.get(t, problem.instance_params(m), problem.omega, problem.polarization,
                     sk.instance_edges[m])

    keyed = {}
    for m in range(M):
        t = lay.template_of(lay.instances[m])
        k = (id(store(m)), lay.instances[m].template in problem.reduced,
             BlockCache.make_key(t, problem.instance_params(m), problem.omega,
                                 problem.polarization, sk.instance_edges[m]))
        keyed.setdefault(k, m)
    uniq = list(keyed.values())
    if workers > 1 and len(uniq) > 1:
        with ThreadPoolExecutor(workers) as ex:
            list(ex.map(build, uniq))
    else:
        for m in uniq:
            build(m)
    blocks, ufs, loads = [], [], []
    for m in range(M):
        blk = build(m)
        blocks.append(blk)
        uf = None
        F = np.zeros(blk.K.shape[0], dtype=complex)
        if problem.has_source(m):
            inst = lay.instances[m]
            t = lay.template_of(inst)
            if blk.op is None:
                raise ValueError("volume sources are not supported in reduced-basis cells")
            mf = mesh_map_fields(t, problem.instance_params(m), problem.degree)
            b = source_load(t, mf, problem.source, lambda X: lay.to_global(inst, X),
                            problem.degree)
            uf = solve_source(blk.op, b)
            F = blk.U.T @ b
        ufs.append(uf)
        loads.append(F)
    return blocks, ufs, loads


def neumann_load(skeleton: SkeletonSpace, h: Callable, n_quad: int = 12) -> np.ndarray:
    """<h, phi_I> over exterior Neumann faces (fixed cell boundaries, g_s = 1)."""
    F = np.zeros(skeleton.n_dofs, dtype=complex)
    for f in skeleton.faces:
        if not (f.exterior and f.bc == "neumann"):
            continue
        le = EdgeLayout(((f.order, f.n_elem),))
        xg, wg = fem.gauss_legendre_01(n_quad)
        for e in range(f.n_elem):
            s = (e + xg) / f.n_elem
            w = wg / f.n_elem * f.length
            x = f.x0 + np.outer(s, f.x1 - f.x0)
            B = _face_basis(le, 0, s)
            hv = np.asarray(h(x[:, 0], x[:, 1]), dtype=complex)
            np.add.at(F, f.dofs(), B.T @ (w * hv))
    return F


def assemble_global(blocks: Sequence[CondensedBlock], skeleton: SkeletonSpace,
                    loads: Optional[Sequence[np.ndarray]] = None,
                    dirichlet_values: Optional[np.ndarray] = None) -> SkeletonSystem:
    """K = sum_m scatter(K^m), F = sum_m scatter(F^m)."""
    if len(blocks) != skeleton.layout.M or any(b is None for b in blocks):
        raise ValueError("every instance needs a condensed block")
    rows, cols, vals = [], [], []
    F = np.zeros(skeleton.n_dofs, dtype=complex)
    for m, blk in enumerate(blocks):
        d = skeleton.instance_dofs[m]
        n = len(d)
        rows.append(np.repeat(d, n))
        cols.append(np.tile(d, n))
        vals.append(blk.K.ravel())
        Fm = blk.F if loads is None or loads[m] is None else blk.F + loads[m]
        np.add.at(F, d, Fm)
    N = skeleton.n_dofs
    K = sp.coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                      shape=(N, N)).tocsr()
    K.sum_duplicates()
    if dirichlet_values is None:
        dirichlet_values = np.zeros(N, dtype=complex)
    return SkeletonSystem(K, F, dirichlet_values)


class SkeletonFactor:
    """Factorized reduced skeleton operator; counts every solve it performs."""

    def __init__(self, system: SkeletonSystem, dirichlet: np.ndarray):
        K = system.K
        self.free = np.where(~dirichlet)[0]
        self.fixed = np.where(dirichlet)[0]
        self.N = K.shape[0]
        self.Kff = K[self.free][:, self.free].tocsc()
        self.Kfd = K[self.free][:, self.fixed]
        self.n_solves = 0
        self.lu = None
        if len(self.free):
            try:
                self.lu = splu(self.Kff)
            except RuntimeError as exc:
                raise GlobalResonanceError(f"skeleton factorization failed: {exc}") from exc
            d = np.abs(self.lu.U.diagonal())
            if d.size and d.min() <= 1e-14 * d.max():
                cond = condition_estimate(self.Kff, self.lu)
                raise GlobalResonanceError(
                    f"skeleton system singular (pivot ratio {d.min() / d.max():.2e}, "
                    f"condition estimate {cond:.2e})", cond)

    def solve_free(self, rhs: np.ndarray, trans: str = "N", tol: float = 1e-10) -> np.ndarray:
        self.n_solves += 1
        rhs = np.asarray(rhs, dtype=complex)
        x = self.lu.solve(rhs, trans=trans)
        A = self.Kff if trans == "N" else self.Kff.T
        r = np.linalg.norm(A @ x - rhs)
        nb = np.linalg.norm(rhs)
        if nb > 0 and r > tol * nb:
            cond = condition_estimate(self.Kff, self.lu)
            raise GlobalResonanceError(
                f"skeleton solve residual {r / nb:.2e} (condition estimate {cond:.2e})", cond)
        return x


def solve_skeleton(system: SkeletonSystem, dirichlet: np.ndarray,
                   tol: float = 1e-10, factor: Optional[SkeletonFactor] = None) -> np.ndarray:
    """Eliminate Dirichlet dofs by substitution and solve the reduced system."""
    fac = factor if factor is not None else SkeletonFactor(system, dirichlet)
    Lam = np.zeros(fac.N, dtype=complex)
    Lam[fac.fixed] = system.dirichlet_values[fac.fixed]
    if len(fac.free) == 0:
        return Lam
    rhs = system.F[fac.free] - fac.Kfd @ Lam[fac.fixed]
    Lam[fac.free] = fac.solve_free(rhs, tol=tol)
    return Lam


def condition_estimate(A: sp.spmatrix, lu=None) -> float:
    """1-norm condition estimate using the factorization."""
    if lu is None:
        try:
            lu = splu(A.tocsc())
        except RuntimeError:
            return np.inf
    n = A.shape[0]
    inv = LinearOperator((n, n), matvec=lu.solve, rmatvec=lambda y: lu.solve(y, trans="T"),
                         dtype=complex)
    return float(sp.linalg.norm(A, 1) * onenormest(inv))


# --------------------------------------------------------------------------
# Dirichlet data
# --------------------------------------------------------------------------


def dirichlet_projection(problem: HelmholtzProblem, blocks: Sequence[CondensedBlock]
                         ) -> np.ndarray:
    """Multiplier values on Dirichlet faces realizing the nodal interpolant of u_D.

    Vertex values are point evaluations; interior face coefficients fit the
    lifted trace to the nodal interpolant of u_D in the trace L2 sense (exact
    whenever the two spaces coincide). Faces whose trace carries fewer nodes
    than the face space fall back to an L2 projection on the face.
    """
    sk = problem.skeleton
    lay = problem.layout
    vals = np.zeros(sk.n_dofs, dtype=complex)
    uD = problem.dirichlet
    if uD is None:
        return vals
    nv = len(sk.vertices)
    vals[:nv] = np.asarray(uD(sk.vertices[:, 0], sk.vertices[:, 1]), dtype=complex)
    for f in sk.faces:
        if not (f.exterior and f.bc == "dirichlet"):
            continue
        m, j, rev = f.owners[0]
        inst = lay.instances[m]
        t = lay.template_of(inst)
        mesh = t.mesh
        ids = mesh.edge_nodes[j]
        le = sk.instance_edges[m]
        cols = le.edge_local_dofs(j)
        gd = sk.instance_dofs[m][cols]
        xb = lay.to_global(inst, mesh.nodes[ids])
        bvals = np.asarray(uD(xb[:, 0], xb[:, 1]), dtype=complex)
        nf = len(cols)
        if nf <= 2:
            continue
        if len(ids) >= nf:
            row = {n: i for i, n in enumerate(mesh.boundary_nodes())}
            Tfull = blocks[m].T if blocks[m].T is not None else trace_projection(t, le)
            Tj = Tfull[[row[n] for n in ids]][:, cols]
            c_end = vals[gd[[0, -1]]]
            A = Tj[:, 1:-1]
            rhs = bvals - Tj[:, [0, -1]] @ c_end
            Mb, _ = _edge_trace_l2(mesh, le, j)
            lhs = A.T @ Mb @ A
            vals[gd[1:-1]] = np.linalg.solve(lhs, A.T @ Mb @ rhs)
        else:
            vals[gd[1:-1]] = _face_l2_fit(f, rev, uD, vals[gd[[0, -1]]])
    return vals


def _face_l2_fit(face, rev, uD, ends, n_quad: int = 20) -> np.ndarray:
    le = EdgeLayout(((face.order, face.n_elem),))
    xg, wg = fem.gauss_legendre_01(n_quad)
    Ms, bs = 0, 0
    for e in range(face.n_elem):
        s = (e + xg) / face.n_elem
        w = wg / face.n_elem
        x = face.x0 + np.outer(s, face.x1 - face.x0)
        B = _face_basis(le, 0, s)
        Ms = Ms + B.T @ (w[:, None] * B)
        bs = bs + B.T @ (w * np.asarray(uD(x[:, 0], x[:, 1]), dtype=complex))
    e0, e1 = (ends[1], ends[0]) if rev else (ends[0], ends[1])
    I = np.arange(1, Ms.shape[0] - 1)
    rhs = bs[I] - Ms[I][:, [0, -1]] @ np.array([e0, e1])
    c = np.linalg.solve(Ms[np.ix_(I, I)], rhs)
    return c[::-1] if rev else c


# --------------------------------------------------------------------------
# driver
# --------------------------------------------------------------------------


def solve_problem(problem: HelmholtzProblem, cache: Optional[BlockCache] = None,
                  workers: int = 1) -> Solution:
    blocks, ufs, loads = instance_blocks(problem, cache, workers)
    dv = dirichlet_projection(problem, blocks)
    system = assemble_global(blocks, problem.skeleton, loads, dv)
    if problem.neumann is not None:
        system.F += neumann_load(problem.skeleton, problem.neumann)
    fac = SkeletonFactor(system, problem.skeleton.dirichlet)
    Lam = solve_skeleton(system, problem.skeleton.dirichlet, factor=fac)
    return Solution(problem, Lam, blocks, ufs, system, fac)


def recover_field(solution: Solution, m: int) -> np.ndarray:
    """u_h = u_f + sum_i Lambda_i u^{phi_i} on the nodes of instance m."""
    blk = solution.blocks[m]
    if blk is None:
        raise KeyError(f"block for instance {m} is not available")
    u = blk.basis() @ solution.local_coeffs(m)
    if solution.uf[m] is not None:
        u = u + solution.uf[m]
    return u


def l2_error(solution: Solution, exact: Callable, degree: Optional[int] = None) -> float:
    """sqrt(sum_T int |u_h - u|^2 g dX) with u evaluated at mapped global points."""
    pb = solution.problem
    lay = pb.layout
    deg = degree if degree is not None else pb.degree
    tot = 0.0
    for m, inst in enumerate(lay.instances):
        t = lay.template_of(inst)
        mesh = t.mesh
        geo = mesh.geometry(deg)
        mf = mesh_map_fields(t, pb.instance_params(m), deg)
        u = recover_field(solution, m)
        uq = np.einsum("qa,ea->eq", geo["N"], u[mesh.elements])
        x = lay.to_global(inst, mf.x.reshape(-1, 2)).reshape(mf.x.shape)
        ue = np.asarray(exact(x[..., 0], x[..., 1]), dtype=complex)
        w = geo["wts"][None, :] * geo["detJ"] * mf.g
        tot += float(np.sum(w * np.abs(uq - ue) ** 2))
    return float(np.sqrt(tot))


def flux_matrix(template, params: GeometryParams, e_local: np.ndarray, omega: float,
                polarization: str, degree: Optional[int] = None) -> np.ndarray:
    """C_ab = int rho N_a (adj(jac) e) . grad_r N_b over the reference cell (dense)."""
    mesh = template.mesh
    geo = mesh.geometry(degree)
    mf = mesh_map_fields(template, params, degree)
    rho, _ = material_coefficients(template, omega, polarization)
    jac = mf.jac
    adj = np.empty_like(jac)
    adj[..., 0, 0] = jac[..., 1, 1]
    adj[..., 1, 1] = jac[..., 0, 0]
    adj[..., 0, 1] = -jac[..., 0, 1]
    adj[..., 1, 0] = -jac[..., 1, 0]
    v = np.einsum("eqij,j->eqi", adj, e_local)
    w = geo["wts"][None, :] * geo["detJ"] * rho[:, None]
    Ce = np.einsum("qa,eqbi,eqi,eq->eab", geo["N"], geo["dNx"], v, w)
    n = mesh.n_nodes
    nl = mesh.elements.shape[1]
    rows = np.repeat(mesh.elements, nl, axis=1).ravel()
    cols = np.tile(mesh.elements, (1, nl)).ravel()
    C = sp.coo_matrix((Ce.ravel(), (rows, cols)), shape=(n, n)).tocsr()
    C.sum_duplicates()
    return C


def port_power(u: np.ndarray, C) -> float:
    """P = int rho e . Re[i u grad conj(u)] = -Im(u^T C conj(u))."""
    return float(-np.imag(u @ (C @ np.conj(u))))


def qoi_power(solution: Solution, outputs: Sequence[int], direction, omega: Optional[float] = None,
              polarization: Optional[str] = None, degree: Optional[int] = None) -> float:
    """s_h = (1 / 2 omega) sum_i |P_i| over the output instances."""
    if len(outputs) == 0:
        raise ValueError("empty output instance list")
    pb = solution.problem
    omega = pb.omega if omega is None else omega
    pol = pb.polarization if polarization is None else polarization
    lay = pb.layout
    e = np.asarray(direction, dtype=float)
    e = e / np.linalg.norm(e)
    s = 0.0
    for m in outputs:
        inst = lay.instances[m]
        t = lay.template_of(inst)
        e_loc = lay.rotation_matrix(inst).T @ e
        C = flux_matrix(t, pb.instance_params(m), e_loc, omega, pol, degree)
        s += abs(port_power(recover_field(solution, m), C))
    return s / (2.0 * omega)


# --------------------------------------------------------------------------
# export
# --------------------------------------------------------------------------


def export_fields(solution: Solution, directory) -> list:
    """One text file per instance: x y Re(u) Im(u) at mapped global nodes."""
    from pathlib import Path

    from .mapping import map_nodes

    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    lay = solution.problem.layout
    paths = []
    for m, inst in enumerate(lay.instances):
        t = lay.template_of(inst)
        x = lay.to_global(inst, map_nodes(t, solution.problem.instance_params(m)))
        u = recover_field(solution, m)
        p = d / f"field_{m:04d}.txt"
        np.savetxt(p, np.column_stack([x, u.real, u.imag]), fmt="%.10e",
                   header="x y re_u im_u")
        paths.append(p)
    return paths


def write_error_table(rows: Sequence[dict], path) -> None:
    """CSV with columns n, q, p, error, order."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["n", "q", "p", "error", "order"])
        for r in rows:
            order = r.get("order")
            w.writerow([r["n"], r["q"], r["p"], f"{r['error']:.6e}",
                        "" if order is None else f"{order:.6e}"])


__all__ = ["GlobalResonanceError", "HelmholtzProblem", "SkeletonSystem", "Solution",
           "instance_blocks", "neumann_load", "assemble_global", "SkeletonFactor", "solve_skeleton",
           "condition_estimate", "dirichlet_projection", "solve_problem", "recover_field",
           "l2_error", "flux_matrix", "port_power", "qoi_power", "export_fields",
           "write_error_table", "ResonanceError"]
