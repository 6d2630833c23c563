from math import factorial

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mscg import fem


def monomial_integral(i: int, j: int) -> float:
    # int_T x^i y^j over the reference triangle
    return factorial(i) * factorial(j) / factorial(i + j + 2)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 12), st.data())
def test_triangle_rule_exact(degree, data):
    i = data.draw(st.integers(0, degree))
    j = data.draw(st.integers(0, degree - i))
    pts, w = fem.triangle_rule(degree)
    approx = np.sum(w * pts[:, 0] ** i * pts[:, 1] ** j)
    assert approx == pytest.approx(monomial_integral(i, j), rel=1e-12, abs=1e-15)


def test_triangle_rule_weights_sum():
    for d in range(1, 15):
        _, w = fem.triangle_rule(d)
        assert w.sum() == pytest.approx(0.5, abs=1e-14)
        assert np.all(w > 0)


@pytest.mark.parametrize("p", [1, 2, 3, 4])
def test_basis_is_nodal_and_partition_of_unity(p):
    nodes = fem.lattice_points(p)
    N, dN = fem.triangle_basis(p, nodes)
    np.testing.assert_allclose(N, np.eye(len(nodes)), atol=1e-12)
    pts, _ = fem.triangle_rule(2 * p)
    N, dN = fem.triangle_basis(p, pts)
    np.testing.assert_allclose(N.sum(1), 1.0, atol=1e-12)
    np.testing.assert_allclose(dN.sum(1), 0.0, atol=1e-11)


@pytest.mark.parametrize("p", [1, 2, 3])
def test_basis_reproduces_polynomials(p):
    nodes = fem.lattice_points(p)
    pts, _ = fem.triangle_rule(6)
    N, dN = fem.triangle_basis(p, pts)
    f = lambda x, y: (1 + x) ** p - 2 * y ** p + x * y ** (p - 1)  # noqa: E731
    vals = f(nodes[:, 0], nodes[:, 1])
    np.testing.assert_allclose(N @ vals, f(pts[:, 0], pts[:, 1]), atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 12))
def test_cgl_lagrange_interpolates(order):
    nodes = fem.cgl_nodes(order)
    assert nodes[0] == 0.0 and nodes[-1] == pytest.approx(1.0)
    np.testing.assert_allclose(fem.lagrange_1d(nodes, nodes), np.eye(order + 1), atol=1e-11)
    s = np.linspace(0, 1, 17)
    coef = np.arange(order + 1, dtype=float)
    poly = np.polynomial.Polynomial(coef)
    L = fem.lagrange_1d(nodes, s)
    np.testing.assert_allclose(L @ poly(nodes), poly(s), rtol=1e-9, atol=1e-9)
    dL = fem.lagrange_1d_deriv(nodes, s)
    np.testing.assert_allclose(dL @ poly(nodes), poly.deriv()(s), rtol=1e-7, atol=1e-7)
