import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mscg.adjoint_opt import (adjoint_gradient, gauss_legendre_interval, maximize_box,
                              optimize_deterministic, optimize_robust_frequency,
                              optimize_robust_geometry, projected_gradient_norm,
                              robust_objective)
from mscg.mapping import KlModel
from mscg.problems import lattice3_design_model

OMEGA = 2 * np.pi * 0.3


@pytest.fixture(scope="module")
def lattice3():
    kl = KlModel(D=4, sigma=0.02, Lc=1.0 / 16.0)
    return lattice3_design_model(kl=kl), kl


def _quad(c):
    c = np.asarray(c, dtype=float)
    return lambda x: (-float(np.sum((x - c) ** 2)), -2 * (x - c))


def test_box_optimizer_interior_optimum():
    res = maximize_box(_quad([0.3, -0.2]), [-1, -1], [1, 1], n_starts=3)
    np.testing.assert_allclose(res.x, [0.3, -0.2], atol=1e-7)
    assert res.success and res.pg_norm < 1e-6
    assert not res.active_lower.any() and not res.active_upper.any()
    h = res.history
    assert h[0]["iter"] == 0
    assert set(h[0]) == {"iter", "objective", "grad_norm", "step", "active_set_size"}


def test_box_optimizer_corner_optimum():
    res = maximize_box(_quad([2.0, -3.0]), [-1, -1], [1, 1], n_starts=2)
    np.testing.assert_allclose(res.x, [1.0, -1.0])
    assert res.active_upper.tolist() == [True, False]
    assert res.active_lower.tolist() == [False, True]
    assert res.pg_norm < 1e-12


def test_box_must_be_finite():
    with pytest.raises(ValueError):
        maximize_box(_quad([0.0]), [-np.inf], [1.0])


def test_projected_gradient_norm_zero_at_kkt_point():
    assert projected_gradient_norm(np.array([1.0]), np.array([5.0]), [-1.0], [1.0]) == 0.0
    assert projected_gradient_norm(np.array([0.0]), np.array([0.5]), [-1.0], [1.0]) == 0.5


def test_gauss_legendre_weights_integrate_polynomials():
    x, w = gauss_legendre_interval(2.0, 5.0, 4)
    assert w.sum() == pytest.approx(1.0)
    assert w @ x ** 7 == pytest.approx((5 ** 8 - 2 ** 8) / 8 / 3, rel=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=3, max_size=3), st.floats(0.0, 3.0))
def test_robust_objective_gradient(c, gamma):
    c = np.asarray(c)
    x, w = gauss_legendre_interval(0.0, 1.0, 3)

    def f(t):
        vals = np.sin(c * t + x)
        grads = (c * np.cos(c * t + x))[:, None]
        return robust_objective(vals, grads, w, gamma)

    t, h = 0.37, 1e-6
    fd = (f(t + h)[0] - f(t - h)[0]) / (2 * h)
    assert f(t)[1][0] == pytest.approx(fd, rel=1e-5, abs=1e-6)


def test_robust_frequency_reduces_to_deterministic():
    fg = _quad([0.1, 0.4])
    det = optimize_deterministic(fg, [-1, -1], [1, 1], n_starts=2)
    rob = optimize_robust_frequency(lambda th, om: fg(th), (1.0, 2.0), [-1, -1], [1, 1],
                                    gamma=0.0, n_quad=1, n_starts=2)
    np.testing.assert_allclose(rob.x, det.x, atol=1e-9)
    # omega-independent objective has zero frequency variance
    rob3 = optimize_robust_frequency(lambda th, om: fg(th), (1.0, 2.0), [-1, -1], [1, 1],
                                     gamma=1.0, n_quad=3, n_starts=2)
    np.testing.assert_allclose(rob3.x, [0.1, 0.4], atol=1e-6)
    assert rob3.extra["V"] < 1e-20


def test_robust_frequency_centres_on_interval():
    # s = -(theta - omega)^2: E is maximized at the interval midpoint for gamma = 0
    def fg(th, om):
        return -float((th[0] - om) ** 2), np.array([-2 * (th[0] - om)])

    res = optimize_robust_frequency(fg, (0.2, 0.6), [-1.0], [1.0], gamma=0.0, n_quad=4,
                                    n_starts=2)
    assert res.x[0] == pytest.approx(0.4, abs=1e-7)


def test_robust_frequency_thread_count_invariant():
    def fg(th, om):
        return float(np.sin(om * th[0]) + np.cos(th[1])), np.array(
            [om * np.cos(om * th[0]), -np.sin(th[1])])

    a = optimize_robust_frequency(fg, (1.0, 1.5), [-1, -1], [1, 1], 0.5, 5, workers=1,
                                  n_starts=2)
    b = optimize_robust_frequency(fg, (1.0, 1.5), [-1, -1], [1, 1], 0.5, 5, workers=4,
                                  n_starts=2)
    np.testing.assert_array_equal(a.x, b.x)


def test_saa_geometry_synthetic():
    # s = -(theta - z)^2 with frozen draws: the SAA optimum is the draw mean at gamma = 0
    draws = np.random.default_rng(3).uniform(-0.5, 0.5, (16, 1))

    def fg(th, om, z):
        return -float((th[0] - z[0]) ** 2), np.array([-2 * (th[0] - z[0])])

    res = optimize_robust_geometry(fg, (1.0, 2.0), [-1.0], [1.0], draws, gamma=0.0, n_quad=2,
                                   n_starts=2)
    assert res.x[0] == pytest.approx(draws.mean(), abs=1e-7)
    assert res.extra["n_draws"] == 16


def test_lattice3_adjoint_matches_finite_differences(lattice3):
    dm, kl = lattice3
    th = np.array([0.02, -0.05])
    z = np.random.default_rng(0).uniform(-1, 1, 2 * kl.n_coeffs)
    sol = dm.solve(th, OMEGA, z)
    res = adjoint_gradient(sol, dm.outputs, dm.direction)
    assert res.n_solves == 1
    n = kl.n_coeffs
    for slot, k in ((0, 0), (1, 0), (0, 2), (1, 3)):
        def val(d):
            t2, z2 = th.copy(), z.copy()
            if k == 0:
                t2[slot] += d
            else:
                z2[slot * n + k - 1] += d
            return dm.value(t2, OMEGA, z2)

        h = 1e-5 if k == 0 else 1e-3
        fd = (val(h) - val(-h)) / (2 * h)
        assert res.grad[slot][k] == pytest.approx(fd, rel=1e-6)


def test_lattice3_gradient_restrictions(lattice3):
    dm, kl = lattice3
    th = np.array([0.01, 0.0])
    z = np.zeros(2 * kl.n_coeffs)
    sol = dm.solve(th, OMEGA, z)
    full = adjoint_gradient(sol, dm.outputs, dm.direction)
    part = adjoint_gradient(sol, dm.outputs, dm.direction, slots=[1], components=[0])
    assert set(part.grad) == {1}
    assert part.grad[1][0] == full.grad[1][0]
    assert np.all(part.grad[1][1:] == 0)
    v, g = dm.value_grad(th, OMEGA, z)
    assert v == pytest.approx(full.value)
    np.testing.assert_allclose(g, [full.grad[0][0], full.grad[1][0]], rtol=1e-12)
