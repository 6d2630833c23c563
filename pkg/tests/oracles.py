"""Independent reference computations used by the tests."""
import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from mscg import fem
from mscg.mapping import map_nodes, mesh_map_fields


def physical_assembly(template, params, degree=None):
    """Stiffness and mass on the deformed cell via the composite Jacobian.

    The physical gradient is formed from d(x)/d(xi) = F(X(xi)) J(xi) at every
    quadrature point, without the pulled-back tensors G and g.
    """
    mesh = template.mesh
    geo = mesh.geometry(degree)
    F = mesh_map_fields(template, params, degree).jac
    Jt = np.einsum("eqij,eqjk->eqik", F, geo["J"])
    det = Jt[..., 0, 0] * Jt[..., 1, 1] - Jt[..., 0, 1] * Jt[..., 1, 0]
    inv = np.linalg.inv(Jt)
    grad = np.einsum("eqji,qaj->eqai", inv, geo["dN"])
    w = geo["wts"][None, :] * np.abs(det)
    ne, nloc = mesh.elements.shape
    K = np.einsum("eqai,eqbi,eq->eab", grad, grad, w)
    M = np.einsum("qa,qb,eq->eab", geo["N"], geo["N"], w)
    rows = np.repeat(mesh.elements, nloc, axis=1).ravel()
    cols = np.tile(mesh.elements, (1, nloc)).ravel()
    n = mesh.n_nodes
    Ks = sp.coo_matrix((K.ravel(), (rows, cols)), shape=(n, n)).tocsr()
    Ms = sp.coo_matrix((M.ravel(), (rows, cols)), shape=(n, n)).tocsr()
    return Ks, Ms


def cg_solve(mesh, kappa2, source, exact, degree=None):
    """Monolithic CG for -lap u - kappa2 u = f, nodal Dirichlet data from `exact`.

    Returns (nodal solution, L2 error against `exact`).
    """
    p = mesh.order
    degree = degree or 2 * p + 2
    pts, wts = fem.triangle_rule(degree)
    N, dN = fem.triangle_basis(p, pts)
    n = mesh.n_nodes
    rows, cols, vals = [], [], []
    b = np.zeros(n)
    for el in mesh.elements:
        X = mesh.nodes[el]
        J = np.einsum("ai,qaj->qij", X, dN)
        det = np.linalg.det(J)
        gx = np.einsum("qji,qaj->qai", np.linalg.inv(J), dN)
        w = wts * det
        xq = N @ X
        Ke = np.einsum("qai,qbi,q->ab", gx, gx, w) - kappa2 * np.einsum("qa,qb,q->ab", N, N, w)
        rows.append(np.repeat(el, len(el)))
        cols.append(np.tile(el, len(el)))
        vals.append(Ke.ravel())
        np.add.at(b, el, N.T @ (w * source(xq[:, 0], xq[:, 1])))
    A = sp.coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                      shape=(n, n)).tocsr()
    bnd = mesh.boundary_nodes()
    free = np.setdiff1d(np.arange(n), bnd)
    u = np.zeros(n)
    u[bnd] = exact(mesh.nodes[bnd, 0], mesh.nodes[bnd, 1])
    u[free] = spla.spsolve(A[free][:, free].tocsc(), b[free] - A[free][:, bnd] @ u[bnd])
    err = 0.0
    for el in mesh.elements:
        X = mesh.nodes[el]
        J = np.einsum("ai,qaj->qij", X, dN)
        w = wts * np.linalg.det(J)
        xq = N @ X
        err += np.sum(w * (N @ u[el] - exact(xq[:, 0], xq[:, 1])) ** 2)
    return u, float(np.sqrt(err))


def deformed_radius(template, params, alpha):
    """Radius of the mapped rod interface nodes closest to angle alpha."""
    X = template.mesh.nodes
    R = np.linalg.norm(X, axis=1)
    R0 = template.R0
    on = np.nonzero(np.abs(R - R0) < 1e-9)[0]
    x = map_nodes(template, params)[on]
    ang = np.mod(np.arctan2(X[on, 1], X[on, 0]), 2 * np.pi)
    return ang, np.linalg.norm(x, axis=1)
