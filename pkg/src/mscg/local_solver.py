"""Per-cell CG operators, lifted Dirichlet solves and static condensation.

All operators live on the reference cell. Geometry enters through the mapped
coefficients (G, g) and PML through a complex diagonal stretch. The bilinear
form is not conjugated, so every operator here is complex symmetric.
"""
from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .geometry import EdgeLayout, SubdomainTemplate, trace_projection
from .mapping import GeometryParams, MapFields, mesh_map_fields

POLARIZATIONS = ("TM", "TE")


class ResonanceError(RuntimeError):
    """Local interior problem is singular at the requested frequency."""


@dataclass
class LocalOperator:
    A: sp.csr_matrix
    interior: np.ndarray
    boundary: np.ndarray  # ordered as mesh.boundary_nodes()
    template_id: str = ""
    omega: float = 0.0
    _lu: object = field(default=None, repr=False)

    @property
    def n_dofs(self) -> int:
        return self.A.shape[0]

    def factorize(self):
        if self._lu is None:
            A_II = self.A[self.interior][:, self.interior].tocsc()
            try:
                lu = splu(A_II)
            except RuntimeError as exc:
                raise ResonanceError(
                    f"interior factorization failed for template {self.template_id!r} "
                    f"at omega={self.omega:g}: {exc}") from exc
            d = np.abs(lu.U.diagonal())
            if d.size and d.min() <= 1e-13 * d.max():
                raise ResonanceError(
                    f"template {self.template_id!r}: omega={self.omega:g} is (close to) an "
                    f"interior Dirichlet eigenvalue (pivot ratio {d.min() / d.max():.2e})")
            self._lu = lu
        return self._lu

    def solve_interior(self, rhs: np.ndarray) -> np.ndarray:
        lu = self.factorize()
        rhs = np.asarray(rhs, dtype=complex)
        x = lu.solve(rhs)
        A_II = self.A[self.interior][:, self.interior]
        r = np.linalg.norm(A_II @ x - rhs)
        nb = np.linalg.norm(rhs)
        if nb > 0 and r > 1e-10 * nb:
            raise ResonanceError(
                f"template {self.template_id!r}: interior residual {r / nb:.2e} at "
                f"omega={self.omega:g}")
        return x


@dataclass
class CondensedBlock:
    K: np.ndarray
    F: np.ndarray
    U: np.ndarray  # lifted trace basis, (n_nodes, n_local)
    uf: Optional[np.ndarray]
    key: tuple
    op: Optional[LocalOperator] = None
    T: Optional[np.ndarray] = None
    rb: Optional[object] = None  # reduced-basis state when built online

    def basis(self) -> np.ndarray:
        """Lifted trace basis U on the cell nodes (formed on demand for reduced blocks)."""
        if self.U is None and self.rb is not None:
            st = self.rb
            self.U = st.model.L + st.model.Z[:, :st.N] @ st.C
        if self.U is None:
            raise KeyError("block has no stored trace basis")
        return self.U


# --------------------------------------------------------------------------
# coefficients and assembly
# --------------------------------------------------------------------------


def pml_stretch(template: SubdomainTemplate, omega: float, X: np.ndarray,
                profile=None) -> tuple[np.ndarray, np.ndarray]:
    """Complex stretch factors s_x, s_y = 1 - i sigma / omega at points X."""
    if omega == 0:
        raise ValueError("PML stretch undefined at omega = 0")
    prof = template.spec.pml if profile is None else profile
    X = np.asarray(X, dtype=float)
    sx = np.ones(X.shape[:-1], dtype=complex)
    sy = np.ones(X.shape[:-1], dtype=complex)
    if prof is None:
        return sx, sy
    a = template.a
    for comp, d, start, depth, out in ((0, prof.x_dir, prof.x_start, prof.x_depth, sx),
                                       (1, prof.y_dir, prof.y_start, prof.y_depth, sy)):
        if d == 0:
            continue
        t = (d * X[..., comp] - start * a) / (depth * a)
        sig = prof.sigma_max * np.clip(t, 0.0, None) ** 2
        out -= 1j * sig / omega
    return sx, sy


def material_coefficients(template: SubdomainTemplate, omega: float, polarization: str):
    """Per-element (rho, kappa^2)."""
    if polarization not in POLARIZATIONS:
        raise ValueError(f"polarization must be one of {POLARIZATIONS}")
    eps = template.mesh.elem_eps
    if polarization == "TM":
        return np.ones_like(eps), omega ** 2 * eps
    return 1.0 / eps, np.full_like(eps, omega ** 2)


def coefficient_fields(template: SubdomainTemplate, mf: MapFields, omega: float,
                       polarization: str, degree: Optional[int] = None):
    """Stiffness tensor rho G_eff and mass weight kappa^2 g_eff at quadrature points."""
    rho, k2 = material_coefficients(template, omega, polarization)
    G = mf.G.astype(complex)
    g = mf.g.astype(complex)
    if template.spec.pml is not None:
        Xq = template.mesh.geometry(degree)["Xq"]
        sx, sy = pml_stretch(template, omega, Xq)
        G = G * np.stack([np.stack([sy / sx, np.ones_like(sx)], -1),
                          np.stack([np.ones_like(sx), sx / sy], -1)], -2)
        g = g * sx * sy
    return rho[:, None, None, None] * G, k2[:, None] * g


def assemble_matrix(mesh, stiff: Optional[np.ndarray], mass: Optional[np.ndarray],
                    degree: Optional[int] = None) -> sp.csr_matrix:
    """Sparse sum_e int (stiff grad N_b . grad N_a + mass N_b N_a)."""
    geo = mesh.geometry(degree)
    w = geo["wts"][None, :] * geo["detJ"]
    ne, nloc = mesh.elements.shape
    dtype = np.result_type(*(x for x in (stiff, mass) if x is not None), float)
    Ke = np.zeros((ne, nloc, nloc), dtype=dtype)
    if stiff is not None:
        dN = geo["dNx"]
        flux = np.einsum("eqij,eqbj->eqib", stiff * w[..., None, None], dN)
        Ke += dN.transpose(0, 2, 1, 3).reshape(ne, nloc, -1) @ flux.reshape(ne, -1, nloc)
    if mass is not None:
        N = geo["N"]
        Ke += np.einsum("qa,eqb->eab", N, (mass * w)[..., None] * N[None], optimize=True)
    rows = np.repeat(mesh.elements, nloc, axis=1).ravel()
    cols = np.tile(mesh.elements, (1, nloc)).ravel()
    n = mesh.n_nodes
    A = sp.coo_matrix((Ke.ravel(), (rows, cols)), shape=(n, n)).tocsr()
    A.sum_duplicates()
    return A


def load_vector(mesh, values: np.ndarray, degree: Optional[int] = None) -> np.ndarray:
    """b_a = sum_e int values N_a for values at quadrature points (ne, nq)."""
    geo = mesh.geometry(degree)
    w = geo["wts"][None, :] * geo["detJ"]
    be = np.einsum("qa,eq->ea", geo["N"], values * w)
    b = np.zeros(mesh.n_nodes, dtype=complex)
    np.add.at(b, mesh.elements.ravel(), be.ravel())
    return b


def assemble_local(template: SubdomainTemplate, map_fields: MapFields, omega: float,
                   polarization: str = "TM", degree: Optional[int] = None) -> LocalOperator:
    """A = (rho G grad u, grad w) - (g kappa^2 u, w) on the reference cell."""
    stiff, mass = coefficient_fields(template, map_fields, omega, polarization, degree)
    A = assemble_matrix(template.mesh, stiff, -mass, degree)
    bnd = template.mesh.boundary_nodes()
    mask = np.ones(template.mesh.n_nodes, dtype=bool)
    mask[bnd] = False
    return LocalOperator(A=A, interior=np.where(mask)[0], boundary=bnd,
                         template_id=template.name, omega=omega)


def solve_dirichlet_family(op: LocalOperator, T: np.ndarray) -> np.ndarray:
    """Columns solve the homogeneous problem with boundary values T[:, i]."""
    n = op.n_dofs
    U = np.zeros((n, T.shape[1]), dtype=complex)
    U[op.boundary] = T
    A_IB = op.A[op.interior][:, op.boundary]
    U[op.interior] = -op.solve_interior(A_IB @ T)
    return U


def solve_source(op: LocalOperator, b: np.ndarray) -> np.ndarray:
    """Zero-trace response to the load vector b (already weighted by g)."""
    u = np.zeros(op.n_dofs, dtype=complex)
    b = np.asarray(b, dtype=complex)
    if not np.any(b[op.interior]):
        return u
    u[op.interior] = op.solve_interior(b[op.interior])
    return u


def condense(op: LocalOperator, U: np.ndarray, uf: Optional[np.ndarray] = None,
             b: Optional[np.ndarray] = None, neumann: Optional[np.ndarray] = None,
             key: tuple = ()) -> CondensedBlock:
    """K_ij = a(u^{phi_j}, u^{phi_i}); F_i = (g f, u^{phi_i}) + <g_s h, phi_i>."""
    K = U.T @ (op.A @ U)
    K = 0.5 * (K + K.T)
    F = np.zeros(U.shape[1], dtype=complex)
    if b is not None:
        F += U.T @ b
    if neumann is not None:
        F += neumann
    return CondensedBlock(K=K, F=F, U=U, uf=uf, key=key, op=op)


# --------------------------------------------------------------------------
# block cache
# --------------------------------------------------------------------------


class BlockCache:
    """Insert-once store of condensed Dirichlet-family blocks.

    Keyed by (template key, params key, omega, polarization, edge layout);
    distinct keys may be built concurrently, a key is built exactly once.
    """

    def __init__(self, degree: Optional[int] = None):
        self.degree = degree
        self._blocks: dict = {}
        self._locks: dict = {}
        self._guard = threading.Lock()
        self.n_factorizations = 0
        self.n_builds = 0

    def __len__(self):
        return len(self._blocks)

    def __contains__(self, key):
        return key in self._blocks

    @staticmethod
    def make_key(template: SubdomainTemplate, params: Optional[GeometryParams], omega: float,
                 polarization: str, layout_e: EdgeLayout) -> tuple:
        pk = params.key() if params is not None else ()
        return (template.key, pk, float(omega), polarization, layout_e.edges)

    def get(self, template: SubdomainTemplate, params: Optional[GeometryParams],
            omega: float, polarization: str, layout_e: EdgeLayout) -> CondensedBlock:
        key = self.make_key(template, params, omega, polarization, layout_e)
        blk = self._blocks.get(key)
        if blk is not None:
            return blk
        with self._guard:
            lock = self._locks.setdefault(key, threading.Lock())
        with lock:
            blk = self._blocks.get(key)
            if blk is None:
                blk = build_block(template, params, omega, polarization, layout_e,
                                  self.degree, key)
                with self._guard:
                    self.n_factorizations += 1
                    self.n_builds += 1
                    self._blocks[key] = blk
        return blk

    def get_reduced(self, model, template: SubdomainTemplate, params: Optional[GeometryParams],
                    omega: float, N: int) -> CondensedBlock:
        from .reduced_basis import rb_condense

        params = params or GeometryParams()
        key = ("rb", id(model), model.template_key, params.key(), float(omega), int(N))
        blk = self._blocks.get(key)
        if blk is None:
            blk = rb_condense(model, template, params, omega, N)
            with self._guard:
                blk = self._blocks.setdefault(key, blk)
        return blk

    def evict(self, key) -> None:
        self._blocks.pop(key, None)

    def clear(self) -> None:
        self._blocks.clear()


def build_block(template: SubdomainTemplate, params: Optional[GeometryParams], omega: float,
                polarization: str, layout_e: EdgeLayout, degree: Optional[int] = None,
                key: tuple = ()) -> CondensedBlock:
    params = params or GeometryParams()
    mf = mesh_map_fields(template, params, degree)
    op = assemble_local(template, mf, omega, polarization, degree)
    T = trace_projection(template, layout_e)
    U = solve_dirichlet_family(op, T)
    blk = condense(op, U, key=key)
    blk.T = T
    return blk


def source_load(template: SubdomainTemplate, mf: MapFields, f: Callable, to_global: Callable,
                degree: Optional[int] = None) -> np.ndarray:
    """Load vector (g f, N_a) for a source f evaluated at global physical points."""
    ne, nq = mf.g.shape
    x = to_global(mf.x.reshape(-1, 2)).reshape(ne, nq, 2)
    fv = np.asarray(f(x[..., 0], x[..., 1]), dtype=complex)
    return load_vector(template.mesh, mf.g * fv, degree)
