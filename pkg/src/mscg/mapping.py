"""Reference-to-physical cell maps driven by a perturbed rod radius.

The rod boundary radius follows a truncated Karhunen-Loeve series in the polar
angle; points between the fixed inner box and the circle, and between the
circle and the fixed cell boundary, are stretched linearly along rays from the
cell centre. Everything here is closed form, including parameter derivatives.

Parameter vector convention for one cell: index 0 is the design scaling theta,
indices 1..n_coeffs are the KL coefficients z.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .geometry import SubdomainTemplate


class MappingError(ValueError):
    pass


@dataclass(frozen=True)
class KlModel:
    """Truncated KL series of the rod radius; ``D`` even, ``D + 1`` coefficients."""

    D: int = 10
    sigma: float = 0.02
    Lc: float = 1.0 / 16.0
    R0: Optional[float] = None

    def __post_init__(self):
        if self.D < 0 or self.D % 2:
            raise ValueError("D must be a non-negative even integer")

    @classmethod
    def from_total(cls, n_coeffs: int, sigma: float = 0.02, Lc: float = 1.0 / 16.0,
                   R0: Optional[float] = None) -> "KlModel":
        return cls(n_coeffs - 1, sigma, Lc, R0)

    @property
    def n_coeffs(self) -> int:
        return self.D + 1

    def amplitudes(self) -> np.ndarray:
        """sqrt(lambda_d) for d = 0..D/2."""
        d = np.arange(self.D // 2 + 1)
        return (self.sigma * np.sqrt(np.sqrt(np.pi) * self.Lc)
                * np.exp(-(d * np.pi * self.Lc) ** 2 / 8.0))

    def basis(self, alpha) -> tuple[np.ndarray, np.ndarray]:
        """Relative radius modes c_k(alpha) and their alpha-derivatives.

        delta R0 / R0 = sum_k z_k c_k(alpha).
        """
        alpha = np.atleast_1d(np.asarray(alpha, dtype=float))
        amp = self.amplitudes()
        c = np.zeros((len(alpha), self.n_coeffs))
        dc = np.zeros_like(c)
        c[:, 0] = amp[0] / np.sqrt(2.0)
        for d in range(1, self.D // 2 + 1):
            ph = d * (alpha + np.pi / 2)
            c[:, 2 * d - 1] = amp[d] * np.sin(ph)
            c[:, 2 * d] = amp[d] * np.cos(ph)
            dc[:, 2 * d - 1] = amp[d] * d * np.cos(ph)
            dc[:, 2 * d] = -amp[d] * d * np.sin(ph)
        return c, dc


@dataclass
class GeometryParams:
    theta: float = 0.0
    z: Optional[np.ndarray] = None
    kl: Optional[KlModel] = None

    def __post_init__(self):
        if self.z is not None:
            self.z = np.asarray(self.z, dtype=float)
            if self.kl is None:
                raise ValueError("KL coefficients given without a KL model")
            if self.z.shape != (self.kl.n_coeffs,):
                raise ValueError(f"z must have length {self.kl.n_coeffs}")

    @property
    def is_identity(self) -> bool:
        return self.theta == 0.0 and (self.z is None or not np.any(self.z))

    @property
    def n_params(self) -> int:
        return 1 + (self.kl.n_coeffs if self.kl is not None else 0)

    def vector(self) -> np.ndarray:
        z = self.z if self.z is not None else np.zeros(self.n_params - 1)
        return np.concatenate([[self.theta], z])

    def key(self) -> tuple:
        return tuple(np.round(self.vector(), 15))

    def with_vector(self, v) -> "GeometryParams":
        v = np.asarray(v, dtype=float)
        z = v[1:] if self.kl is not None else None
        return GeometryParams(float(v[0]), z, self.kl)

    def in_box(self, theta_box=None, gamma: Optional[np.ndarray] = None) -> bool:
        ok = True
        if theta_box is not None:
            ok &= theta_box[0] <= self.theta <= theta_box[1]
        if gamma is not None and self.z is not None:
            ok &= bool(np.all(np.abs(self.z) <= gamma))
        return bool(ok)


def kl_radius(model: KlModel, theta: float, z, alpha, R0: Optional[float] = None,
              bounds: Optional[tuple] = None) -> np.ndarray:
    """r0(alpha) = R0 (1 + theta) + R0 sum_k z_k c_k(alpha)."""
    R0 = model.R0 if R0 is None else R0
    if R0 is None:
        raise ValueError("nominal radius R0 required")
    z = np.zeros(model.n_coeffs) if z is None else np.asarray(z, dtype=float)
    if z.shape != (model.n_coeffs,):
        raise ValueError(f"z must have length {model.n_coeffs}")
    c, _ = model.basis(alpha)
    r0 = R0 * (1.0 + theta) + R0 * (c @ z)
    if bounds is not None:
        lo, hi = bounds
        if np.any(r0 <= lo) or np.any(r0 >= hi):
            warnings.warn("perturbed radius leaves the admissible annulus", RuntimeWarning)
    return r0 if np.ndim(alpha) else r0[0]


@dataclass
class MapFields:
    G: np.ndarray  # (..., 2, 2)
    g: np.ndarray  # (...)
    jac: np.ndarray  # deformation gradient, (..., 2, 2)
    gs: Optional[np.ndarray] = None
    x: Optional[np.ndarray] = None  # physical points, template frame


def _adj(A: np.ndarray) -> np.ndarray:
    out = np.empty_like(A)
    out[..., 0, 0] = A[..., 1, 1]
    out[..., 1, 1] = A[..., 0, 0]
    out[..., 0, 1] = -A[..., 0, 1]
    out[..., 1, 0] = -A[..., 1, 0]
    return out


def _sector_of(template: SubdomainTemplate, X: np.ndarray) -> np.ndarray:
    nrm = template.edge_normals()
    # argmax picks the lowest index on ties, i.e. the x-facing edge first
    return np.argmax(X @ nrm.T, axis=1)


def _region_of(template: SubdomainTemplate, X, sector, R) -> np.ndarray:
    nrm = template.edge_normals()[sector]
    nX = np.einsum("ij,ij->i", nrm, X)
    Bl = template.ell * R / np.where(nX > 0, nX, np.inf)
    reg = np.where(R <= template.R0, 1, 2)
    return np.where((R < Bl * (1 - 1e-12)) | (R == 0), 0, reg)


class _RadialEval:
    """Shared intermediate quantities of the radial map at a set of points."""

    def __init__(self, template: SubdomainTemplate, params: GeometryParams, X,
                 sector=None, region=None, check: bool = True):
        if not template.mappable:
            raise MappingError(f"template {template.name!r} has no radial map")
        X = np.atleast_2d(np.asarray(X, dtype=float))
        self.X = X
        self.template = template
        self.params = params
        R = np.linalg.norm(X, axis=1)
        Rs = np.where(R > 0, R, 1.0)
        if sector is None:
            sector = _sector_of(template, X)
        if region is None:
            region = _region_of(template, X, sector, R)
        self.region = np.broadcast_to(region, R.shape)
        self.active = self.region > 0
        h = template.apothem
        R0n = template.R0
        s = template.ell / h
        nrm = template.edge_normals()[sector]
        nX = np.einsum("ij,ij->i", nrm, X)
        nX = np.where(np.abs(nX) > 0, nX, 1.0)
        gR = X / Rs[:, None]
        galpha = np.column_stack([-X[:, 1], X[:, 0]]) / (Rs ** 2)[:, None]
        B = h * R / nX
        gB = h * (gR * nX[:, None] - R[:, None] * nrm) / (nX ** 2)[:, None]
        Bl, gBl = s * B, s * gB
        alpha = np.arctan2(X[:, 1], X[:, 0])
        kl = params.kl
        if kl is not None:
            cb, dcb = kl.basis(alpha)
        else:
            cb = np.zeros((len(R), 0))
            dcb = cb
        z = params.z if params.z is not None else np.zeros(cb.shape[1])
        r0 = R0n * (1.0 + params.theta + cb @ z)
        dr0 = R0n * (dcb @ z)

        in1 = self.region == 1
        # branch R <= R0: anchored at the inner box
        d1 = np.where(in1, R0n - Bl, 1.0)
        t1 = (R - Bl) / d1
        gt1 = ((gR - gBl) * d1[:, None] + (R - Bl)[:, None] * gBl) / (d1 ** 2)[:, None]
        # branch R > R0: anchored at the cell boundary
        d2 = np.where(in1, 1.0, B - R0n)
        t2 = (R - R0n) / d2
        gt2 = (gR * d2[:, None] - (R - R0n)[:, None] * gB) / (d2 ** 2)[:, None]
        c = np.where(in1, Bl * (1 - t1), B * t2)
        gc = np.where(in1[:, None], gBl * (1 - t1)[:, None] - Bl[:, None] * gt1,
                      gB * t2[:, None] + B[:, None] * gt2)
        w = np.where(in1, t1, 1 - t2)
        gw = np.where(in1[:, None], gt1, -gt2)

        if check and np.any(self.active):
            bad = self.active & ((r0 <= Bl) | (r0 >= B))
            if np.any(bad):
                k = int(np.argmax(bad))
                raise MappingError(
                    f"radial map not a diffeomorphism at X={X[k]}: r0={r0[k]:.6g} "
                    f"outside ({Bl[k]:.6g}, {B[k]:.6g})")
        r = c + w * r0
        gr = gc + r0[:, None] * gw + (w * dr0)[:, None] * galpha
        self.R, self.Rs, self.r = R, Rs, r
        self.gR, self.galpha, self.gw, self.w = gR, galpha, gw, w
        self.alpha, self.cb, self.dcb = alpha, cb, dcb
        phi = r / Rs
        gphi = gr / Rs[:, None] - (r / Rs ** 3)[:, None] * X
        act = self.active
        self.x = np.where(act[:, None], phi[:, None] * X, X)
        jac = phi[:, None, None] * np.eye(2) + X[:, :, None] * gphi[:, None, :]
        self.jac = np.where(act[:, None, None], jac, np.eye(2))

    def d_jac(self, k: int) -> tuple[np.ndarray, np.ndarray]:
        """(dx, d jac) for parameter k (0: theta, k >= 1: z_k)."""
        R0n = self.template.R0
        if k == 0:
            b = np.ones(len(self.R))
            db = np.zeros(len(self.R))
        else:
            if self.cb.shape[1] < k:
                raise IndexError(f"parameter index {k} out of range")
            b = self.cb[:, k - 1]
            db = self.dcb[:, k - 1]
        dr0 = R0n * b
        ddr0 = R0n * db
        dr = self.w * dr0
        dgr = dr0[:, None] * self.gw + (self.w * ddr0)[:, None] * self.galpha
        dphi = dr / self.Rs
        dgphi = dgr / self.Rs[:, None] - (dr / self.Rs ** 3)[:, None] * self.X
        dx = dphi[:, None] * self.X
        dj = dphi[:, None, None] * np.eye(2) + self.X[:, :, None] * dgphi[:, None, :]
        act = self.active
        return (np.where(act[:, None], dx, 0.0), np.where(act[:, None, None], dj, 0.0))


def radial_map(template: SubdomainTemplate, params: GeometryParams, X, sector=None,
               region=None) -> tuple[np.ndarray, np.ndarray]:
    """Physical points and deformation gradients for reference points X."""
    X = np.asarray(X, dtype=float)
    single = X.ndim == 1
    ev = _RadialEval(template, params, np.atleast_2d(X), sector, region)
    if single:
        return ev.x[0], ev.jac[0]
    return ev.x, ev.jac


def fields_from_jacobian(jac: np.ndarray, tangents: Optional[np.ndarray] = None) -> MapFields:
    g = jac[..., 0, 0] * jac[..., 1, 1] - jac[..., 0, 1] * jac[..., 1, 0]
    if np.any(g <= 0):
        raise MappingError("map Jacobian determinant is not positive")
    A = _adj(jac)
    G = np.einsum("...ik,...jk->...ij", A, A) / g[..., None, None]
    gs = None
    if tangents is not None:
        gs = np.linalg.norm(np.einsum("...ij,...j->...i", jac, tangents), axis=-1)
    return MapFields(G=G, g=g, jac=jac, gs=gs)


def map_fields(template: SubdomainTemplate, params: GeometryParams, X, sector=None,
               region=None, tangents=None) -> MapFields:
    """G = g F^{-1} F^{-T}, g = det F and face ratio g_s = |F t| at points X."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if not template.mappable or params.is_identity:
        n = len(X)
        jac = np.broadcast_to(np.eye(2), (n, 2, 2)).copy()
        if template.mappable:
            _RadialEval(template, params, X, sector, region)  # admissibility check
        mf = fields_from_jacobian(jac, tangents)
        mf.x = X.copy()
        return mf
    ev = _RadialEval(template, params, X, sector, region)
    mf = fields_from_jacobian(ev.jac, tangents)
    mf.x = ev.x
    return mf


def map_param_derivatives(template: SubdomainTemplate, params: GeometryParams, X, k: int,
                          sector=None, region=None, tangents=None) -> MapFields:
    """Closed-form derivatives (dG, dg, d jac, dg_s) w.r.t. parameter k."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if k < 0 or k >= params.n_params:
        raise IndexError(f"parameter index {k} out of range")
    ev = _RadialEval(template, params, X, sector, region)
    jac = ev.jac
    _, dj = ev.d_jac(k)
    A = _adj(jac)
    dA = _adj(dj)
    g = jac[..., 0, 0] * jac[..., 1, 1] - jac[..., 0, 1] * jac[..., 1, 0]
    dg = np.einsum("...ij,...ji->...", A, dj)
    G = np.einsum("...ik,...jk->...ij", A, A) / g[..., None, None]
    dG = (np.einsum("...ik,...jk->...ij", dA, A) + np.einsum("...ik,...jk->...ij", A, dA)
          ) / g[..., None, None] - G * (dg / g)[..., None, None]
    dgs = None
    if tangents is not None:
        Ft = np.einsum("...ij,...j->...i", jac, tangents)
        dFt = np.einsum("...ij,...j->...i", dj, tangents)
        dgs = np.einsum("...i,...i->...", Ft, dFt) / np.linalg.norm(Ft, axis=-1)
    dx, _ = ev.d_jac(k)
    return MapFields(G=dG, g=dg, jac=dj, gs=dgs, x=dx)


def element_point_tags(template: SubdomainTemplate, n_q: int) -> tuple[np.ndarray, np.ndarray]:
    """Sector and region per element quadrature point (flattened e-major)."""
    m = template.mesh
    return np.repeat(m.elem_sector, n_q), np.repeat(m.elem_region, n_q)


def mesh_map_fields(template: SubdomainTemplate, params: GeometryParams,
                    degree: Optional[int] = None) -> MapFields:
    """Map fields at all element quadrature points, shaped (ne, nq, ...)."""
    geo = template.mesh.geometry(degree)
    ne, nq = geo["Xq"].shape[:2]
    X = geo["Xq"].reshape(-1, 2)
    if template.mappable:
        sec, reg = element_point_tags(template, nq)
        mf = map_fields(template, params, X, sec, reg)
    else:
        mf = map_fields(template, params, X)
    return MapFields(G=mf.G.reshape(ne, nq, 2, 2), g=mf.g.reshape(ne, nq),
                     jac=mf.jac.reshape(ne, nq, 2, 2), x=mf.x.reshape(ne, nq, 2))


def mesh_map_derivatives(template: SubdomainTemplate, params: GeometryParams, k: int,
                         degree: Optional[int] = None) -> MapFields:
    geo = template.mesh.geometry(degree)
    ne, nq = geo["Xq"].shape[:2]
    X = geo["Xq"].reshape(-1, 2)
    sec, reg = element_point_tags(template, nq)
    d = map_param_derivatives(template, params, X, k, sec, reg)
    return MapFields(G=d.G.reshape(ne, nq, 2, 2), g=d.g.reshape(ne, nq),
                     jac=d.jac.reshape(ne, nq, 2, 2), x=d.x.reshape(ne, nq, 2))


def map_nodes(template: SubdomainTemplate, params: GeometryParams) -> np.ndarray:
    """Physical positions of the template mesh nodes."""
    X = template.mesh.nodes
    if not template.mappable or params.is_identity:
        return X.copy()
    return _RadialEval(template, params, X).x
