"""DEIM affine expansions and a reduced basis for the lifted trace family.

Offline, the mapped coefficients G (three independent entries, shared magic
points) and g are interpolated by DEIM, and the homogeneous parts u - L of the
Dirichlet-family solutions over a training set are compressed by one weighted
POD. Online, a block K^m costs O((Q + K) N^2 + N^2 n_g) and never touches the
full mesh.
"""
from __future__ import annotations

import io
import json
import struct
import time
import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import scipy.linalg as sla

from .geometry import EdgeLayout, SubdomainTemplate, trace_projection
from .local_solver import (CondensedBlock, ResonanceError, assemble_local, assemble_matrix,
                           build_block, material_coefficients, solve_dirichlet_family)
from .mapping import (GeometryParams, KlModel, element_point_tags, map_fields,
                      map_param_derivatives, mesh_map_fields)

RB_MAGIC = b"MSCGRB\x00\x01"
RB_VERSION = 1


# --------------------------------------------------------------------------
# DEIM
# --------------------------------------------------------------------------


class RbFileError(ValueError):
    """Unreadable or incompatible reduced-model file."""



def _flatten_G(G: np.ndarray) -> np.ndarray:
    return np.stack([G[..., 0, 0], G[..., 0, 1], G[..., 1, 1]]).reshape(3, -1)


def _unflatten_G(v: np.ndarray, shape) -> np.ndarray:
    c = v.reshape(3, *shape)
    G = np.empty(shape + (2, 2), dtype=v.dtype)
    G[..., 0, 0] = c[0]
    G[..., 0, 1] = c[1]
    G[..., 1, 0] = c[1]
    G[..., 1, 1] = c[2]
    return G


@dataclass
class AffineExpansion:
    """Field ~ sum_q sigma_q(params) mode_q, with sigma from values at magic points."""

    kind: str  # "G" or "g"
    modes: np.ndarray  # (Q, n_comp * n_points)
    magic: np.ndarray  # indices into the flattened field
    points: np.ndarray  # (Q, 2) reference coordinates of magic points
    sectors: np.ndarray
    regions: np.ndarray
    comps: np.ndarray  # component of each magic index
    field_shape: tuple  # (ne, nq)
    train_error: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def size(self) -> int:
        return len(self.magic)

    @property
    def P(self) -> np.ndarray:
        return self.modes[:, self.magic].T

    def _values(self, mf) -> np.ndarray:
        if self.kind == "G":
            G = mf.G
            comp = np.stack([G[:, 0, 0], G[:, 0, 1], G[:, 1, 1]])
            return comp[self.comps, np.arange(self.size)]
        return mf.g

    def coefficients(self, template: SubdomainTemplate, params: GeometryParams) -> np.ndarray:
        mf = map_fields(template, params, self.points, self.sectors, self.regions)
        return np.linalg.solve(self.P, self._values(mf))

    def coefficient_derivative(self, template: SubdomainTemplate, params: GeometryParams,
                               k: int) -> np.ndarray:
        d = map_param_derivatives(template, params, self.points, k, self.sectors, self.regions)
        return np.linalg.solve(self.P, self._values(d))

    def reconstruct(self, coeffs: np.ndarray) -> np.ndarray:
        v = coeffs @ self.modes
        if self.kind == "G":
            return _unflatten_G(v, self.field_shape)
        return v.reshape(self.field_shape)


def deim_indices(U: np.ndarray) -> np.ndarray:
    """Greedy DEIM point selection for the columns of U."""
    n, m = U.shape
    idx = [int(np.argmax(np.abs(U[:, 0])))]
    for l in range(1, m):
        c = np.linalg.solve(U[idx, :l], U[idx, l])
        r = U[:, l] - U[:, :l] @ c
        idx.append(int(np.argmax(np.abs(r))))
    return np.array(idx, dtype=int)


def deim_from_snapshots(S: np.ndarray, tol: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(modes (Q, n), magic indices, per-Q max relative training error).

    Q is the smallest size whose interpolant reproduces every snapshot column
    to `tol` relative in the max norm.
    """
    Uf, s, _ = np.linalg.svd(S, full_matrices=False)
    rank = int(np.sum(s > s[0] * 1e-14)) if s.size and s[0] > 0 else 0
    if rank == 0:
        raise ValueError("empty DEIM snapshot set")
    Uf = Uf[:, :rank]
    idx = deim_indices(Uf)
    scale = np.max(np.abs(S))
    errs = {}

    def err(Q):
        if Q not in errs:
            U = Uf[:, :Q]
            coef = np.linalg.solve(U[idx[:Q]], S[idx[:Q]])
            errs[Q] = float(np.max(np.abs(S - U @ coef)) / scale)
        return errs[Q]

    # doubling then bisection on the (empirically monotone) error curve
    hi = 1
    while hi < rank and err(hi) >= tol:
        hi = min(2 * hi, rank)
    if err(hi) >= tol:
        raise ValueError(f"DEIM tolerance {tol:g} unreachable with {S.shape[1]} snapshots "
                         f"(best {min(errs.values()):.2e})")
    lo = hi // 2 if hi > 1 else 0
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if err(mid) < tol:
            hi = mid
        else:
            lo = mid
    Q = hi
    hist = np.array([errs[k] for k in sorted(errs)])
    return Uf[:, :Q].T.copy(), idx[:Q].copy(), hist


def deim_build(template: SubdomainTemplate, train_params: Sequence[GeometryParams],
               tol: float = 1e-6, degree: Optional[int] = None
               ) -> tuple[AffineExpansion, AffineExpansion]:
    """DEIM expansions of G (stacked components) and g over the training set."""
    if not train_params:
        raise ValueError("empty training set")
    geo = template.mesh.geometry(degree)
    ne, nq = geo["Xq"].shape[:2]
    SG, Sg = [], []
    for p in train_params:
        mf = mesh_map_fields(template, p, degree)
        SG.append(_flatten_G(mf.G).ravel())
        Sg.append(mf.g.ravel())
    X = geo["Xq"].reshape(-1, 2)
    sec, reg = element_point_tags(template, nq)
    out = []
    for kind, S, ncomp in (("G", np.array(SG).T, 3), ("g", np.array(Sg).T, 1)):
        modes, idx, errs = deim_from_snapshots(S, tol)
        pts = idx % (ne * nq)
        out.append(AffineExpansion(kind, modes, idx, X[pts], sec[pts], reg[pts],
                                   idx // (ne * nq), (ne, nq), errs))
    return out[0], out[1]


# --------------------------------------------------------------------------
# snapshots and POD
# --------------------------------------------------------------------------


def lifting_matrix(template: SubdomainTemplate, layout_e: EdgeLayout) -> np.ndarray:
    """Zero-interior extension L of the trace basis (n_nodes, n_g)."""
    T = trace_projection(template, layout_e)
    L = np.zeros((template.mesh.n_nodes, T.shape[1]))
    L[template.mesh.boundary_nodes()] = T
    return L


def snapshot_generate(template: SubdomainTemplate, params_set: Sequence[GeometryParams],
                      omegas: Sequence[float], layout_e: EdgeLayout, polarization: str = "TM",
                      degree: Optional[int] = None, return_info: bool = False):
    """Homogeneous parts u^{phi_i} - L_i for every (params, omega) and trace function.

    Complex columns are split into real and imaginary parts. Resonant samples
    are skipped with a warning.
    """
    L = lifting_matrix(template, layout_e)
    T = L[template.mesh.boundary_nodes()]
    cols, used = [], []
    for p in params_set:
        mf = mesh_map_fields(template, p, degree)
        for w in omegas:
            op = assemble_local(template, mf, w, polarization, degree)
            try:
                U = solve_dirichlet_family(op, T)
            except ResonanceError as exc:
                warnings.warn(f"snapshot skipped: {exc}", RuntimeWarning)
                continue
            V = U - L
            cols.append(V.real)
            if np.any(V.imag):
                cols.append(V.imag)
            used.append((p.key(), float(w)))
    S = np.hstack(cols) if cols else np.zeros((template.mesh.n_nodes, 0))
    if return_info:
        return S, used
    return S


def energy_matrix(template: SubdomainTemplate, degree: Optional[int] = None):
    """Unit-coefficient stiffness plus mass on the reference cell (real, SPD on W(0))."""
    ne, nq = template.mesh.geometry(degree)["Xq"].shape[:2]
    I = np.broadcast_to(np.eye(2), (ne, nq, 2, 2))
    return assemble_matrix(template.mesh, I, np.ones((ne, nq)), degree).real


@dataclass
class PodBasis:
    Z: np.ndarray  # (n_nodes, N), W-orthonormal, zero on the boundary
    sigma: np.ndarray  # singular values, non-increasing


def pod_compress(S: np.ndarray, W, interior: np.ndarray, N_max: int) -> PodBasis:
    """Leading W-weighted left singular vectors of the snapshot matrix."""
    n = S.shape[0]
    Wd = W[interior][:, interior].toarray() if hasattr(W, "toarray") else W[np.ix_(interior, interior)]
    R = sla.cholesky(Wd, lower=True)  # W = R R^T
    Y = R.T @ S[interior]
    Phi, s, _ = np.linalg.svd(Y, full_matrices=False)
    rank = int(np.sum(s > s[0] * 1e-13)) if s.size and s[0] > 0 else 0
    if N_max > rank:
        warnings.warn(f"N_max={N_max} exceeds snapshot rank {rank}; truncated", RuntimeWarning)
        N_max = rank
    Zi = sla.solve_triangular(R.T, Phi[:, :N_max], lower=False)
    Z = np.zeros((n, N_max))
    Z[interior] = Zi
    return PodBasis(Z, s)


# --------------------------------------------------------------------------
# reduced model
# --------------------------------------------------------------------------


@dataclass
class ReducedModel:
    template_key: str
    edges: tuple
    polarization: str
    kl: Optional[KlModel]
    expG: AffineExpansion
    expg: AffineExpansion
    Z: np.ndarray
    L: np.ndarray
    sigma: np.ndarray
    SZZ: np.ndarray
    SZL: np.ndarray
    SLL: np.ndarray
    MZZ: np.ndarray
    MZL: np.ndarray
    MLL: np.ndarray
    meta: dict = field(default_factory=dict)

    @property
    def N_max(self) -> int:
        return self.Z.shape[1]

    @property
    def Q(self) -> int:
        return self.expG.size

    @property
    def K(self) -> int:
        return self.expg.size

    def check_template(self, template: SubdomainTemplate, layout_e: Optional[EdgeLayout] = None):
        if template.key != self.template_key:
            raise ValueError("reduced model was trained on a different template")
        if layout_e is not None and tuple(layout_e.edges) != tuple(self.edges):
            raise ValueError("reduced model was trained for a different face layout")


def affine_operators(template: SubdomainTemplate, expG: AffineExpansion, expg: AffineExpansion,
                     polarization: str, degree: Optional[int] = None):
    """Sparse S_q (stiffness of G modes) and M_k (mass of g modes, omega^2 factored out)."""
    rho, k2 = material_coefficients(template, 1.0, polarization)
    S = []
    for q in range(expG.size):
        Gq = expG.reconstruct(np.eye(expG.size)[q])
        S.append(assemble_matrix(template.mesh, rho[:, None, None, None] * Gq, None, degree).real)
    M = []
    for k in range(expg.size):
        gk = expg.reconstruct(np.eye(expg.size)[k])
        M.append(assemble_matrix(template.mesh, None, k2[:, None] * gk, degree).real)
    return S, M


def build_reduced_model(template: SubdomainTemplate, layout_e: EdgeLayout,
                        train_params: Sequence[GeometryParams], omegas: Sequence[float],
                        N_max: int, polarization: str = "TM", deim_tol: float = 1e-6,
                        degree: Optional[int] = None, kl: Optional[KlModel] = None,
                        meta: Optional[dict] = None) -> ReducedModel:
    """Offline stage: DEIM, snapshots, weighted POD and projected affine pieces."""
    expG, expg = deim_build(template, train_params, deim_tol, degree)
    S = snapshot_generate(template, train_params, omegas, layout_e, polarization, degree)
    W = energy_matrix(template, degree)
    bnd = template.mesh.boundary_nodes()
    interior = np.setdiff1d(np.arange(template.mesh.n_nodes), bnd)
    pod = pod_compress(S, W, interior, N_max)
    L = lifting_matrix(template, layout_e)
    Z = pod.Z
    Sq, Mk = affine_operators(template, expG, expg, polarization, degree)

    def project(ops):
        ZZ = np.array([Z.T @ (A @ Z) for A in ops])
        ZL = np.array([Z.T @ (A @ L) for A in ops])
        LL = np.array([L.T @ (A @ L) for A in ops])
        return ZZ, ZL, LL

    SZZ, SZL, SLL = project(Sq)
    MZZ, MZL, MLL = project(Mk)
    info = dict(n_params=len(train_params), omegas=[float(w) for w in omegas],
                n_snapshots=int(S.shape[1]), deim_tol=deim_tol)
    info.update(meta or {})
    return ReducedModel(template.key, tuple(layout_e.edges), polarization, kl, expG, expg, Z, L,
                        pod.sigma, SZZ, SZL, SLL, MZZ, MZL, MLL, info)


def _reduced_operator(model: ReducedModel, sig, vsig, omega: float, N: int):
    w2 = omega ** 2
    AZZ = np.tensordot(sig, model.SZZ[:, :N, :N], 1) - w2 * np.tensordot(vsig, model.MZZ[:, :N, :N], 1)
    AZL = np.tensordot(sig, model.SZL[:, :N], 1) - w2 * np.tensordot(vsig, model.MZL[:, :N], 1)
    ALL = np.tensordot(sig, model.SLL, 1) - w2 * np.tensordot(vsig, model.MLL, 1)
    return AZZ, AZL, ALL


@dataclass
class RbState:
    model: ReducedModel
    N: int
    C: np.ndarray  # reduced coefficients of the lifted family (N, n_g)
    sig: np.ndarray
    vsig: np.ndarray


def rb_condense(model: ReducedModel, template: SubdomainTemplate, params: GeometryParams,
                omega: float, N: Optional[int] = None) -> CondensedBlock:
    """Approximate K^m from the reduced Galerkin solves of the lifted trace family."""
    N = model.N_max if N is None else N
    if N < 1:
        raise ValueError("reduced basis size must be at least 1")
    if N > model.N_max:
        raise ValueError(f"N={N} exceeds N_max={model.N_max}")
    sig = model.expG.coefficients(template, params)
    vsig = model.expg.coefficients(template, params)
    AZZ, AZL, ALL = _reduced_operator(model, sig, vsig, omega, N)
    C = -np.linalg.solve(AZZ, AZL)
    K = ALL + AZL.T @ C
    K = 0.5 * (K + K.T)
    blk = CondensedBlock(K=K.astype(complex), F=np.zeros(K.shape[0], dtype=complex), U=None,
                         uf=None, key=("rb", model.template_key, params.key(), float(omega), N))
    blk.rb = RbState(model, N, C, sig, vsig)
    return blk


def rb_block_derivative(blk: CondensedBlock, template: SubdomainTemplate, params: GeometryParams,
                        omega: float, k: int) -> np.ndarray:
    """dK/dparam_k = U_N^T dA U_N through the differentiated DEIM coefficients."""
    st = blk.rb
    m, N, C = st.model, st.N, st.C
    dsig = m.expG.coefficient_derivative(template, params, k)
    dvsig = m.expg.coefficient_derivative(template, params, k)
    dZZ, dZL, dLL = _reduced_operator(m, dsig, dvsig, omega, N)
    dK = dLL + dZL.T @ C + C.T @ dZL + C.T @ dZZ @ C
    return 0.5 * (dK + dK.T)


def rb_trace_basis(blk: CondensedBlock) -> np.ndarray:
    st = blk.rb
    return st.model.L + st.model.Z[:, :st.N] @ st.C


def rb_speedup_report(model: ReducedModel, template: SubdomainTemplate,
                      params_set: Sequence[GeometryParams], omega: float,
                      Ns: Sequence[int], layout_e: EdgeLayout, repeats: int = 1) -> dict:
    """Wall-time ratio full / reduced block computation (informational)."""
    t0 = time.perf_counter()
    for _ in range(repeats):
        for p in params_set:
            build_block(template, p, omega, model.polarization, layout_e)
    t_full = (time.perf_counter() - t0) / (repeats * len(params_set))
    out = dict(full_time=t_full, n_local=template.mesh.n_nodes, rows=[])
    for N in Ns:
        t0 = time.perf_counter()
        for _ in range(repeats):
            for p in params_set:
                rb_condense(model, template, p, omega, N)
        t_rb = (time.perf_counter() - t0) / (repeats * len(params_set))
        out["rows"].append(dict(N=int(N), rb_time=t_rb, speedup=t_full / t_rb))
    return out


# --------------------------------------------------------------------------
# persistence
# --------------------------------------------------------------------------

_ARRAYS = ("Z", "L", "sigma", "SZZ", "SZL", "SLL", "MZZ", "MZL", "MLL")
_EXP_ARRAYS = ("modes", "magic", "points", "sectors", "regions", "comps", "train_error")


def save_reduced(model: ReducedModel, path) -> None:
    """Versioned binary file: magic, version, JSON header, little-endian arrays."""
    arrays = {k: getattr(model, k) for k in _ARRAYS}
    for tag, e in (("G", model.expG), ("g", model.expg)):
        for k in _EXP_ARRAYS:
            arrays[f"exp{tag}.{k}"] = getattr(e, k)
    entries, blobs, off = [], [], 0
    for name in sorted(arrays):
        a = np.asarray(arrays[name])
        if np.iscomplexobj(a):
            raise ValueError(f"array {name} must be real")
        kind = "i8" if a.dtype.kind in "iu" else "f8"
        data = np.ascontiguousarray(a, dtype="<" + kind).tobytes()
        entries.append(dict(name=name, dtype=kind, shape=list(a.shape), offset=off,
                            nbytes=len(data)))
        blobs.append(data)
        off += len(data)
    kl = None if model.kl is None else dict(D=model.kl.D, sigma=model.kl.sigma, Lc=model.kl.Lc,
                                            R0=model.kl.R0)
    header = dict(template_key=model.template_key, edges=[list(e) for e in model.edges],
                  polarization=model.polarization, kl=kl, Q=model.Q, K=model.K,
                  N_max=model.N_max, D=None if model.kl is None else model.kl.D,
                  field_shape=list(model.expG.field_shape), meta=model.meta, arrays=entries,
                  sigma=[float(s) for s in model.sigma])
    hb = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(RB_MAGIC)
        fh.write(struct.pack("<II", RB_VERSION, len(hb)))
        fh.write(hb)
        for b in blobs:
            fh.write(b)


def load_reduced(path) -> ReducedModel:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:len(RB_MAGIC)] != RB_MAGIC:
        raise RbFileError("not a reduced-model file")
    ver, hl = struct.unpack("<II", raw[len(RB_MAGIC):len(RB_MAGIC) + 8])
    if ver != RB_VERSION:
        raise RbFileError(f"unsupported reduced-model file version {ver}")
    start = len(RB_MAGIC) + 8
    header = json.loads(raw[start:start + hl].decode())
    body = io.BytesIO(raw[start + hl:]).getbuffer()
    arrays = {}
    for e in header["arrays"]:
        a = np.frombuffer(body[e["offset"]:e["offset"] + e["nbytes"]], dtype="<" + e["dtype"])
        arrays[e["name"]] = a.reshape(e["shape"]).astype(np.int64 if e["dtype"] == "i8" else float)
    fs = tuple(header["field_shape"])
    exps = {}
    for tag in ("G", "g"):
        kw = {k: arrays[f"exp{tag}.{k}"] for k in _EXP_ARRAYS}
        exps[tag] = AffineExpansion(kind=tag, field_shape=fs, **kw)
    kl = None if header["kl"] is None else KlModel(**header["kl"])
    return ReducedModel(header["template_key"], tuple(tuple(e) for e in header["edges"]),
                        header["polarization"], kl, exps["G"], exps["g"],
                        *(arrays[k] for k in _ARRAYS), meta=header["meta"])
