import numpy as np
import pytest

from mscg.geometry import build_lattice, build_skeleton
from mscg.global_solver import (HelmholtzProblem, flux_matrix, l2_error, port_power,
                                qoi_power, recover_field, solve_problem, write_error_table)
from mscg.local_solver import BlockCache
from mscg.mapping import GeometryParams
from mscg.problems import Planewave, dof_counts, planewave_problem
from oracles import cg_solve


def test_manufactured_solution_small():
    pw = Planewave()
    sol = solve_problem(planewave_problem(16, 2, 2, pw))
    assert l2_error(sol, pw.exact) < 5e-4


def test_quadratic_solution_is_exact_for_p2():
    # u = x^2 + y^2 solves -lap u - u = -4 - x^2 - y^2; P2 reproduces it exactly
    pw = Planewave(k=1.0, angle=0.0)
    exact = lambda x, y: x ** 2 + y ** 2  # noqa: E731
    pb = planewave_problem(8, 2, 2, pw)
    pb.source = lambda x, y: -4.0 - x ** 2 - y ** 2
    pb.dirichlet = exact
    sol = solve_problem(pb)
    assert l2_error(sol, exact) < 1e-11


def test_zero_drive_gives_zero_field():
    pb = planewave_problem(8, 2, 2)
    pb.source = None
    pb.dirichlet = lambda x, y: np.zeros_like(x)
    sol = solve_problem(pb)
    assert np.abs(sol.Lam).max() == 0.0
    assert qoi_power(sol, [0], (1.0, 0.0)) == 0.0


def test_matches_monolithic_cg_q1():
    pw = Planewave()
    n, p = 8, 2
    sol = solve_problem(planewave_problem(n, p, 1, pw, cap=n * p))
    mesh = sol.problem.layout.template_of(sol.problem.layout.instances[0]).mesh
    shifted = lambda f: (lambda x, y: f(x + 0.5, y + 0.5))  # noqa: E731
    u_cg, err_cg = cg_solve(mesh, 1.0, shifted(pw.source), shifted(pw.exact))
    u = recover_field(sol, 0)
    assert np.linalg.norm(u - u_cg) / np.linalg.norm(u_cg) < 1e-9
    assert l2_error(sol, pw.exact) == pytest.approx(err_cg, rel=1e-9)


def test_cache_reuse_across_identical_cells():
    cache = BlockCache()
    solve_problem(planewave_problem(16, 1, 4, cap=4), cache)
    assert cache.n_factorizations == 1


def test_dof_counts_formula():
    d = dof_counts(128, 1, 8)
    assert (d["local"], d["skeleton"], d["cg"]) == (289, 1377, 16641)


def test_planewave_port_power(plain_template):
    # u = exp(i k x) carries P = k per unit cell area in +x
    k = 3.0
    t = plain_template
    u = np.exp(1j * k * t.mesh.nodes[:, 0])
    C = flux_matrix(t, GeometryParams(), np.array([1.0, 0.0]), k, "TM", 8)
    assert port_power(u, C) == pytest.approx(k, rel=2e-3)
    C = flux_matrix(t, GeometryParams(), np.array([0.0, 1.0]), k, "TM", 8)
    assert abs(port_power(u, C)) < 1e-10


def test_qoi_rejects_empty_outputs():
    sol = solve_problem(planewave_problem(8, 1, 2))
    with pytest.raises(ValueError):
        qoi_power(sol, [], (1.0, 0.0))


def test_neumann_exterior(plain_template):
    # u = x on [-.5, 1.5] x [-.5, .5] with omega = 0 scaled mass: -lap u = 0, du/dn = n_x
    lay = build_lattice({"plain": plain_template}, [["plain", "plain"]])

    def bc(face):
        return "neumann" if abs(face.x0[0] - face.x1[0]) < 1e-12 else "dirichlet"

    sk = build_skeleton(lay, lambda f: (4, 1), bc_rule=bc)
    om = 0.5
    exact = lambda x, y: np.sin(om * x) + 0 * y  # noqa: E731
    pb = HelmholtzProblem(sk, om, dirichlet=exact,
                          neumann=lambda x, y: om * np.cos(om * x) * np.sign(x - 0.5))
    sol = solve_problem(pb)
    assert l2_error(sol, exact) < 1e-4


def test_write_error_table(tmp_path):
    path = tmp_path / "t.csv"
    write_error_table([dict(n=8, q=1, p=1, error=0.0123456789, order=None)], path)
    lines = path.read_text().splitlines()
    assert lines[0] == "n,q,p,error,order"
    assert lines[1] == "8,1,1,1.234568e-02,"
