"""Problem builders: manufactured planewave, photonic-crystal lattices."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .geometry import (PmlProfile, TemplateSpec, build_lattice, build_skeleton,
                       build_template)
from .global_solver import HelmholtzProblem


@dataclass(frozen=True)
class Planewave:
    """u = x^2 + y^2 + sin(k (x cos t + y sin t)) with rho = kappa^2 = 1."""

    k: float = 6.0
    angle: float = np.pi / 4

    def exact(self, x, y):
        return x ** 2 + y ** 2 + np.sin(self.k * (x * np.cos(self.angle) + y * np.sin(self.angle)))

    def source(self, x, y):
        ph = self.k * (x * np.cos(self.angle) + y * np.sin(self.angle))
        return -4.0 - x ** 2 - y ** 2 + (self.k ** 2 - 1.0) * np.sin(ph)


def face_order(n: int, p: int, q: int, cap: int = 10) -> int:
    return min(cap, n * p // q)


def dof_counts(n: int, p: int, q: int, cap: int = 10) -> dict:
    """Local, skeleton and monolithic CG dof counts on an n x n unit-square mesh."""
    pf = face_order(n, p, q, cap)
    return dict(local=(n * p // q + 1) ** 2, skeleton=(q + 1) * (2 * q * pf - q + 1),
                cg=(n * p + 1) ** 2, pf=pf)


def planewave_problem(n: int, p: int, q: int, pw: Planewave = Planewave(),
                      diagonal: str = "\\", cap: int = 10,
                      degree: Optional[int] = None) -> HelmholtzProblem:
    """Unit square split into q x q cells, each meshed with (n/q)^2 split squares."""
    if n % q:
        raise ValueError("n must be divisible by q")
    a = 1.0 / q
    spec = TemplateSpec(kind="plain", symmetry="square", cell_size=a, R0=None,
                        order=p, n_side=n // q, diagonal=diagonal)
    t = build_template(spec, name="plain")
    grid = [["plain"] * q for _ in range(q)]
    lay = build_lattice({"plain": t}, grid, cell_size=a, origin=(0.5 * a, 0.5 * a))
    pf = face_order(n, p, q, cap)
    sk = build_skeleton(lay, lambda f: (pf, 1))
    return HelmholtzProblem(sk, omega=1.0, polarization="TM", source=pw.source,
                            dirichlet=pw.exact, degree=degree)


# --------------------------------------------------------------------------
# square-lattice photonic crystals
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class CrystalSpec:
    """Square lattice of dielectric rods in air, lattice constant 1."""

    R0: float = 0.4
    eps_rod: float = 11.4
    eps_bg: float = 1.0
    order: int = 2
    h: float = 0.1
    pml_sigma: float = 20.0
    pml_h: float = 0.1
    face_order: int = 10


def crystal_templates(cs: CrystalSpec = CrystalSpec()) -> dict:
    """rod, defect (plain air), pml side (+x outward) and pml corner (+x, +y outward)."""
    base = dict(symmetry="square", cell_size=1.0, order=cs.order)
    rod = build_template(TemplateSpec(kind="rod", R0=cs.R0, h=cs.h, eps_in=cs.eps_rod,
                                      eps_out=cs.eps_bg, **base), name="rod")
    plain = build_template(TemplateSpec(kind="plain", h=cs.h, eps_out=cs.eps_bg, **base),
                           name="defect")
    side = build_template(TemplateSpec(kind="pml", h=cs.pml_h, eps_out=cs.eps_bg,
                                       pml=PmlProfile(cs.pml_sigma, x_dir=1), **base),
                          name="pml_side")
    corner = build_template(TemplateSpec(kind="pml", h=cs.pml_h, eps_out=cs.eps_bg,
                                         pml=PmlProfile(cs.pml_sigma, x_dir=1, y_dir=1),
                                         **base), name="pml_corner")
    return {"rod": rod, "defect": plain, "pml_side": side, "pml_corner": corner}


def with_pml_ring(core, core_slots=None):
    """Surround a core grid (rows bottom to top) by one ring of PML cells.

    Returns (grid, rotations, slots). Side cells are rotated so that their local
    +x axis points outward; corners so that local +x and +y point outward.
    """
    nr = len(core)
    nc = len(core[0])
    grid = [[None] * (nc + 2) for _ in range(nr + 2)]
    rot = [[0] * (nc + 2) for _ in range(nr + 2)]
    slots = [[None] * (nc + 2) for _ in range(nr + 2)]
    for r in range(nr + 2):
        for c in range(nc + 2):
            top, bot = r == nr + 1, r == 0
            left, right = c == 0, c == nc + 1
            if (top or bot) and (left or right):
                grid[r][c] = "pml_corner"
                rot[r][c] = {(True, False): 0, (True, True): 1, (False, True): 2,
                             (False, False): 3}[(top, left)]
            elif right or top or left or bot:
                grid[r][c] = "pml_side"
                rot[r][c] = 0 if right else 1 if top else 2 if left else 3
            else:
                grid[r][c] = core[r - 1][c - 1]
                if core_slots is not None:
                    slots[r][c] = core_slots[r - 1][c - 1]
    return grid, rot, slots


@dataclass
class CrystalProblem:
    problem: HelmholtzProblem
    grid: list
    source_cell: tuple
    templates: dict

    def instance_at(self, row: int, col: int) -> int:
        """Instance index of core cell (row, col) (core coordinates, bottom row 0)."""
        lay = self.problem.layout
        for m, inst in enumerate(lay.instances):
            if inst.row == row + 1 and inst.col == col + 1:
                return m
        raise KeyError((row, col))


def crystal_problem(core, omega: float, source_cell: tuple, cs: CrystalSpec = CrystalSpec(),
                    core_slots=None, templates: Optional[dict] = None,
                    polarization: str = "TM", degree: Optional[int] = None) -> CrystalProblem:
    """Rod lattice with PML ring, homogeneous Dirichlet outside the PML and a unit
    volume source in one core cell."""
    templates = templates or crystal_templates(cs)
    grid, rot, slots = with_pml_ring(core, core_slots)
    lay = build_lattice(templates, grid, rotations=rot, slots=slots, cell_size=1.0)
    sk = build_skeleton(lay, lambda f: (cs.face_order, 1))
    cp = CrystalProblem(None, grid, source_cell, templates)
    pb = HelmholtzProblem(sk, omega, polarization, source=lambda x, y: np.ones_like(x),
                          dirichlet=lambda x, y: np.zeros_like(x), degree=degree)
    cp.problem = pb
    pb.source_instances = [cp.instance_at(*source_cell)]
    return cp


def line_defect_core(n: int, defect_row: Optional[int] = None) -> list:
    """n x n rods with the middle row replaced by air."""
    r0 = n // 2 if defect_row is None else defect_row
    return [["defect" if r == r0 else "rod" for _ in range(n)] for r in range(n)]


def bend_core(n: int, design: int = 1):
    """n x n rods with an L-shaped defect: in along the middle row from the left,
    out along the middle column to the top. Rods within `design` cells of the
    bend corner (outside the defect) carry design slots 0, 1, ...

    Returns (core, slots, input cell, output cell).
    """
    mid = n // 2
    core = [["rod"] * n for _ in range(n)]
    for c in range(mid + 1):
        core[mid][c] = "defect"
    for r in range(mid, n):
        core[r][mid] = "defect"
    slots = [[None] * n for _ in range(n)]
    k = 0
    for r in range(mid - design, mid + design + 1):
        for c in range(mid - design, mid + design + 1):
            if core[r][c] == "rod":
                slots[r][c] = k
                k += 1
    return core, slots, (mid, 0), (n - 1, mid)


def bend_design_model(n: int = 9, omega: float = 2 * np.pi * 0.38, design: int = 1,
                      cs: CrystalSpec = CrystalSpec(), kl=None, random: bool = True,
                      templates: Optional[dict] = None, degree: Optional[int] = None):
    """Design wrapper for the L-bend: input source at the left end of the middle
    row, output power in +y through the top defect cell. With `random`, the
    design rods also carry KL radius perturbations."""
    from .adjoint_opt import DesignModel

    core, slots, src, out = bend_core(n, design)
    cp = crystal_problem(core, omega, src, cs, core_slots=slots, templates=templates,
                         degree=degree)
    design_slots = sorted({s for row in slots for s in row if s is not None})
    return DesignModel(cp.problem, design_slots, [cp.instance_at(*out)], (0.0, 1.0),
                       random_slots=design_slots if random else (), kl=kl), cp


def row_amplitude(solution, cp: CrystalProblem, row: int, cols, band: float = 0.25) -> float:
    """max |u| over mesh nodes of core cells (row, c) within `band` of the cell's
    horizontal midline (local frame; all core cells are unrotated)."""
    from .global_solver import recover_field

    lay = cp.problem.layout
    amp = 0.0
    for c in cols:
        m = cp.instance_at(row, c)
        t = lay.template_of(lay.instances[m])
        sel = np.abs(t.mesh.nodes[:, 1]) <= band * t.a
        amp = max(amp, float(np.abs(recover_field(solution, m))[sel].max()))
    return amp


def lattice3_templates(R0: float = 0.2, eps_rod: float = 11.4, order: int = 2,
                       h: float = 0.2) -> dict:
    base = dict(symmetry="square", cell_size=1.0, order=order, h=h)
    return {"rod": build_template(TemplateSpec(kind="rod", R0=R0, eps_in=eps_rod, **base),
                                  name="rod"),
            "plain": build_template(TemplateSpec(kind="plain", **base), name="plain")}


def lattice3_design_model(omega: float = 2 * np.pi * 0.3, kl=None,
                          templates: Optional[dict] = None, face_order: int = 10,
                          degree: Optional[int] = None):
    """3 x 3 cell lattice: unit source in the left middle cell, output power in +x
    through the right middle cell, design rods in the centre (slot 0) and top
    middle (slot 1) cells. The exterior carries a complex planewave Dirichlet
    datum so the field transports power."""
    from .adjoint_opt import DesignModel

    templates = templates or lattice3_templates()
    grid = [["rod", "rod", "rod"], ["plain", "rod", "plain"], ["rod", "rod", "rod"]]
    slots = [[None, None, None], [None, 0, None], [None, 1, None]]
    lay = build_lattice(templates, grid, slots=slots, cell_size=1.0)
    sk = build_skeleton(lay, lambda f: (face_order, 1))
    kx, ky = 0.8 * omega, 0.6 * omega
    pb = HelmholtzProblem(sk, omega, "TM", source=lambda x, y: np.ones_like(x),
                          source_instances=[3],
                          dirichlet=lambda x, y: np.exp(1j * (kx * x + ky * y)), degree=degree)
    return DesignModel(pb, [0, 1], [5], (1.0, 0.0), random_slots=[0, 1] if kl else (), kl=kl)
