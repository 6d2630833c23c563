"""Reference-element machinery: quadrature rules and Lagrange bases.

Triangles use the unit reference simplex (0,0), (1,0), (0,1) with nodes on the
equispaced lattice (a/p, b/p), a + b <= p, numbered b-major::

    index(a, b) = sum_{j<b} (p + 1 - j) + a

Face (1D) bases are Lagrange polynomials on Chebyshev-Gauss-Lobatto points of
[0, 1].
"""
from __future__ import annotations

from functools import lru_cache

import numpy as np
from scipy.special import roots_jacobi


def gauss_legendre_01(n: int) -> tuple[np.ndarray, np.ndarray]:
    """n-point Gauss-Legendre rule on [0, 1]."""
    x, w = np.polynomial.legendre.leggauss(n)
    return 0.5 * (x + 1.0), 0.5 * w


@lru_cache(maxsize=None)
def triangle_rule(degree: int) -> tuple[np.ndarray, np.ndarray]:
    """Collapsed Gauss rule on the reference triangle, exact to `degree`.

    Returns points (nq, 2) and weights (nq,) summing to 1/2.
    """
    n = max(1, (degree + 2) // 2)
    # Gauss-Jacobi in the collapsed direction absorbs the (1 - u) Jacobian.
    u, wu = roots_jacobi(n, 1.0, 0.0)
    u = 0.5 * (u + 1.0)
    wu = wu / 4.0
    v, wv = gauss_legendre_01(n)
    U, V = np.meshgrid(u, v, indexing="ij")
    W = np.outer(wu, wv)
    # x = v (1 - u), y = u is the collapse onto the (0,1) vertex
    pts = np.column_stack([(V * (1.0 - U)).ravel(), U.ravel()])
    return pts, W.ravel()


def lattice_index(p: int) -> np.ndarray:
    """Array idx[a, b] of local node numbers (-1 outside the simplex)."""
    idx = -np.ones((p + 1, p + 1), dtype=int)
    k = 0
    for b in range(p + 1):
        for a in range(p + 1 - b):
            idx[a, b] = k
            k += 1
    return idx


@lru_cache(maxsize=None)
def lattice_points(p: int) -> np.ndarray:
    pts = []
    for b in range(p + 1):
        for a in range(p + 1 - b):
            pts.append((a / p, b / p))
    return np.array(pts)


def _exponents(p: int) -> list[tuple[int, int]]:
    return [(i, j) for j in range(p + 1) for i in range(p + 1 - j)]


@lru_cache(maxsize=None)
def _vandermonde_inverse(p: int) -> np.ndarray:
    pts = lattice_points(p)
    exps = _exponents(p)
    V = np.column_stack([pts[:, 0] ** i * pts[:, 1] ** j for i, j in exps])
    return np.linalg.inv(V)


def triangle_basis(p: int, pts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """P^p Lagrange basis and reference gradients at points.

    Returns (N, dN) with N of shape (nq, nloc) and dN of shape (nq, nloc, 2).
    """
    pts = np.atleast_2d(pts)
    x, y = pts[:, 0], pts[:, 1]
    exps = _exponents(p)
    Vinv = _vandermonde_inverse(p)
    P = np.column_stack([x ** i * y ** j for i, j in exps])
    Px = np.column_stack(
        [i * x ** max(i - 1, 0) * y ** j if i > 0 else np.zeros_like(x) for i, j in exps]
    )
    Py = np.column_stack(
        [j * x ** i * y ** max(j - 1, 0) if j > 0 else np.zeros_like(x) for i, j in exps]
    )
    N = P @ Vinv
    dN = np.stack([Px @ Vinv, Py @ Vinv], axis=-1)
    return N, dN


def cgl_nodes(order: int) -> np.ndarray:
    """Chebyshev-Gauss-Lobatto points on [0, 1], increasing, endpoints included."""
    if order < 1:
        raise ValueError("face order must be >= 1")
    j = np.arange(order + 1)
    s = 0.5 * (1.0 - np.cos(np.pi * j / order))
    s[0], s[-1] = 0.0, 1.0
    return s


def lagrange_1d(nodes: np.ndarray, s: np.ndarray) -> np.ndarray:
    """Matrix L[k, i] = ell_i(s_k) of the Lagrange basis on `nodes`."""
    nodes = np.asarray(nodes, dtype=float)
    s = np.atleast_1d(np.asarray(s, dtype=float))
    n = len(nodes)
    L = np.ones((len(s), n))
    for i in range(n):
        for j in range(n):
            if i != j:
                L[:, i] *= (s - nodes[j]) / (nodes[i] - nodes[j])
    return L


def lagrange_1d_deriv(nodes: np.ndarray, s: np.ndarray) -> np.ndarray:
    nodes = np.asarray(nodes, dtype=float)
    s = np.atleast_1d(np.asarray(s, dtype=float))
    n = len(nodes)
    D = np.zeros((len(s), n))
    for i in range(n):
        for m in range(n):
            if m == i:
                continue
            term = np.full(len(s), 1.0 / (nodes[i] - nodes[m]))
            for j in range(n):
                if j != i and j != m:
                    term *= (s - nodes[j]) / (nodes[i] - nodes[j])
            D[:, i] += term
    return D


def edge_local_nodes(p: int) -> list[np.ndarray]:
    """Local node numbers along the three triangle edges, vertex to vertex.

    Edge 0: v0 -> v1, edge 1: v1 -> v2, edge 2: v2 -> v0.
    """
    idx = lattice_index(p)
    e0 = np.array([idx[a, 0] for a in range(p + 1)])
    e1 = np.array([idx[p - b, b] for b in range(p + 1)])
    e2 = np.array([idx[0, p - b] for b in range(p + 1)])
    return [e0, e1, e2]
