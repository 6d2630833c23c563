"""Subdomain templates, lattice layouts and the interface skeleton.

A template is a high-order triangulation of one unit cell, expressed in its own
frame with the cell centred at the origin. Cells are regular polygons (square or
hexagon). Rod/hole cells are meshed sector by sector along rays from the
origin so that nodes sit exactly on the inner box, on the nominal circle and on
the cell boundary; this is the structure the radial geometry map expects.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.spatial import cKDTree

from . import fem

SYMMETRY_SIDES = {"square": 4, "triangular": 6}


class GeometryError(ValueError):
    pass


# --------------------------------------------------------------------------
# templates
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class PmlProfile:
    """Quadratic absorption ramp along the local x and/or y axis.

    For an axis with direction d (+1/-1) the profile is
    sigma(x) = sigma_max * ((d*x - start) / depth)^2 for d*x > start.
    """

    sigma_max: float = 20.0
    x_dir: int = 0
    x_start: float = -0.5
    x_depth: float = 1.0
    y_dir: int = 0
    y_start: float = -0.5
    y_depth: float = 1.0


@dataclass(frozen=True)
class TemplateSpec:
    """Inputs of :func:`build_template`. Lengths are fractions of `cell_size`."""

    kind: str = "rod"  # rod | plain | pml
    symmetry: str = "square"
    cell_size: float = 1.0
    R0: Optional[float] = 0.4
    ell: Optional[float] = None
    h: float = 0.1
    order: int = 2
    n_side: Optional[int] = None
    n_in: Optional[int] = None
    n_out: Optional[int] = None
    eps_in: float = 1.0
    eps_out: float = 1.0
    diagonal: str = "/"
    pml: Optional[PmlProfile] = None

    def key(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha1(blob).hexdigest()[:16]


@dataclass
class HighOrderMesh:
    nodes: np.ndarray  # (nn, 2)
    elements: np.ndarray  # (ne, nloc), lattice-ordered P^p nodes
    order: int
    polygon: np.ndarray  # (nv, 2) cell vertices, counter-clockwise
    edge_nodes: list  # per polygon edge: node ids sorted along the edge
    edge_params: list  # matching arc parameters in [0, 1]
    edge_segments: list  # per polygon edge: (nseg, p+1) ids oriented along the edge
    elem_region: np.ndarray  # 0 inner box, 1 inside circle, 2 outside circle
    elem_sector: np.ndarray  # polygon edge whose sector holds the element
    elem_eps: np.ndarray
    _geom: dict = field(default_factory=dict, repr=False)

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    @property
    def n_elements(self) -> int:
        return len(self.elements)

    def boundary_nodes(self) -> np.ndarray:
        return np.unique(np.concatenate(self.edge_nodes))

    def geometry(self, degree: Optional[int] = None) -> dict:
        """Isoparametric element geometry at quadrature points (cached)."""
        if degree is None:
            degree = 2 * self.order + 2
        if degree in self._geom:
            return self._geom[degree]
        pts, wts = fem.triangle_rule(degree)
        N, dN = fem.triangle_basis(self.order, pts)
        Xe = self.nodes[self.elements]  # (ne, nloc, 2)
        Xq = np.einsum("qa,eai->eqi", N, Xe)
        J = np.einsum("eai,qaj->eqij", Xe, dN)
        det = J[..., 0, 0] * J[..., 1, 1] - J[..., 0, 1] * J[..., 1, 0]
        inv = np.empty_like(J)
        inv[..., 0, 0] = J[..., 1, 1] / det
        inv[..., 1, 1] = J[..., 0, 0] / det
        inv[..., 0, 1] = -J[..., 0, 1] / det
        inv[..., 1, 0] = -J[..., 1, 0] / det
        # physical-reference gradients: grad N = J^{-T} dN
        dNx = np.einsum("eqji,qaj->eqai", inv, dN)
        geo = dict(pts=pts, wts=wts, N=N, dN=dN, Xq=Xq, J=J, detJ=det, dNx=dNx)
        self._geom[degree] = geo
        return geo

    def min_jacobian(self) -> float:
        return float(self.geometry()["detJ"].min())


@dataclass
class SubdomainTemplate:
    spec: TemplateSpec
    mesh: HighOrderMesh
    name: str = ""

    @property
    def key(self) -> str:
        return self.spec.key()

    @property
    def a(self) -> float:
        return self.spec.cell_size

    @property
    def n_sides(self) -> int:
        return SYMMETRY_SIDES[self.spec.symmetry]

    @property
    def apothem(self) -> float:
        return 0.5 * self.spec.cell_size

    @property
    def R0(self) -> Optional[float]:
        if self.spec.R0 is None or self.spec.kind != "rod":
            return None
        return self.spec.R0 * self.spec.cell_size

    @property
    def ell(self) -> Optional[float]:
        if self.R0 is None:
            return None
        frac = self.spec.ell if self.spec.ell is not None else 0.25 * self.spec.R0
        return frac * self.spec.cell_size

    @property
    def mappable(self) -> bool:
        return self.spec.kind == "rod"

    def edge_normals(self) -> np.ndarray:
        n = self.n_sides
        ang = 2 * np.pi * np.arange(n) / n
        return np.column_stack([np.cos(ang), np.sin(ang)])


def regular_polygon(n_sides: int, apothem: float) -> np.ndarray:
    """Vertices v_j so that edge j (v_j -> v_{j+1}) has outward normal at 2*pi*j/n."""
    rc = apothem / np.cos(np.pi / n_sides)
    ang = 2 * np.pi * (np.arange(n_sides) - 0.5) / n_sides
    return rc * np.column_stack([np.cos(ang), np.sin(ang)])


def _merge_points(points: np.ndarray, tol: float) -> tuple[np.ndarray, np.ndarray]:
    """Merge coincident points; returns (unique points, index map)."""
    tree = cKDTree(points)
    pairs = tree.query_pairs(tol, output_type="ndarray")
    parent = np.arange(len(points))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for i, j in pairs:
        ri, rj = find(i), find(j)
        if ri != rj:
            parent[max(ri, rj)] = min(ri, rj)
    roots = np.array([find(i) for i in range(len(points))])
    uniq, inv = np.unique(roots, return_inverse=True)
    return points[uniq], inv


def _triangles_from_lattice(coarse: list, p: int, fine_id: Callable) -> np.ndarray:
    """P^p connectivity for coarse triangles given by integer corner triples."""
    out = []
    lat = [(a, b) for b in range(p + 1) for a in range(p + 1 - b)]
    for c0, c1, c2 in coarse:
        c0, c1, c2 = np.asarray(c0), np.asarray(c1), np.asarray(c2)
        e1, e2 = c1 - c0, c2 - c0
        out.append([fine_id(*(p * c0 + a * e1 + b * e2)) for a, b in lat])
    return np.array(out, dtype=int)


def _quad_split(i: int, j: int, diagonal: str) -> list:
    if diagonal == "/":
        return [((i, j), (i + 1, j), (i + 1, j + 1)), ((i, j), (i + 1, j + 1), (i, j + 1))]
    return [((i, j), (i + 1, j), (i, j + 1)), ((i + 1, j + 1), (i, j + 1), (i + 1, j))]


def _mesh_plain_square(spec: TemplateSpec, half: float, m: int, p: int):
    M = m * p
    g = np.linspace(-half, half, M + 1)
    X, Y = np.meshgrid(g, g, indexing="ij")
    pts = np.column_stack([X.ravel(), Y.ravel()])
    coarse = []
    for i in range(m):
        for j in range(m):
            coarse += _quad_split(i, j, spec.diagonal)
    elems = _triangles_from_lattice(coarse, p, lambda a, b: a * (M + 1) + b)
    ne = len(elems)
    return pts, elems, np.full(ne, 2), -np.ones(ne, dtype=int)


def _mesh_sectors(spec: TemplateSpec, poly: np.ndarray, apothem: float, p: int,
                  m: int, R0: Optional[float], ell: float, n_in: int, n_out: int):
    """Sector-by-sector radial mesh; circle of radius R0 is a node layer."""
    nv = len(poly)
    all_pts, all_elems, regions, sectors = [], [], [], []
    offset = 0
    scale = ell / apothem
    M = m * p
    for s_id in range(nv):
        va, vb = poly[s_id], poly[(s_id + 1) % nv]
        # inner triangle (origin, scale*va, scale*vb)
        A, B = scale * va, scale * vb
        ids = -np.ones((M + 1, M + 1), dtype=int)
        pts = []
        for j in range(M + 1):
            for i in range(M + 1 - j):
                ids[i, j] = len(pts)
                pts.append(i / M * A + j / M * B)
        coarse = []
        for j in range(m):
            for i in range(m - j):
                coarse.append(((i, j), (i + 1, j), (i, j + 1)))
                if i + j + 2 <= m:
                    coarse.append(((i + 1, j + 1), (i, j + 1), (i + 1, j)))
        el = _triangles_from_lattice(coarse, p, lambda a, b: ids[a, b])
        all_pts.append(np.array(pts))
        all_elems.append(el + offset)
        regions.append(np.zeros(len(el), dtype=int))
        sectors.append(np.full(len(el), s_id))
        offset += len(pts)

        # radial trapezoid: first lattice index radial (t), second along edge (s)
        layers = n_in + n_out if R0 is not None else n_in
        T = layers * p
        pts = np.zeros(((T + 1) * (M + 1), 2))
        for js in range(M + 1):
            P = va + js / M * (vb - va)
            Bd = np.linalg.norm(P)
            e = P / Bd
            Bl = scale * Bd
            for kt in range(T + 1):
                if R0 is None:
                    R = Bl + (Bd - Bl) * kt / T
                elif kt <= n_in * p:
                    R = Bl + (R0 - Bl) * kt / (n_in * p)
                else:
                    R = R0 + (Bd - R0) * (kt - n_in * p) / (n_out * p)
                pts[kt * (M + 1) + js] = R * e
        coarse, reg = [], []
        for kt in range(layers):
            for js in range(m):
                tris = _quad_split(kt, js, spec.diagonal)
                coarse += tris
                r = 1 if (R0 is not None and kt < n_in) else 2
                reg += [r, r]
        el = _triangles_from_lattice(coarse, p, lambda a, b: a * (M + 1) + b)
        all_pts.append(pts)
        all_elems.append(el + offset)
        regions.append(np.array(reg))
        sectors.append(np.full(len(el), s_id))
        offset += len(pts)
    return (np.vstack(all_pts), np.vstack(all_elems), np.concatenate(regions),
            np.concatenate(sectors))


def _boundary_structure(nodes, elements, p, poly, tol):
    nv = len(poly)
    edge_nodes, edge_params, edge_segments = [], [], []
    local_edges = fem.edge_local_nodes(p)
    for j in range(nv):
        va, vb = poly[j], poly[(j + 1) % nv]
        t = vb - va
        L = np.linalg.norm(t)
        t = t / L
        nrm = np.array([t[1], -t[0]])
        d = (nodes - va) @ nrm
        s = (nodes - va) @ t / L
        on = np.where((np.abs(d) < tol) & (s > -tol) & (s < 1 + tol))[0]
        order = np.argsort(s[on])
        ids = on[order]
        edge_nodes.append(ids)
        edge_params.append(np.clip(s[ids], 0.0, 1.0))
        onset = np.zeros(len(nodes), dtype=bool)
        onset[ids] = True
        segs = []
        for el in elements:
            for le in local_edges:
                nd = el[le]
                if onset[nd].all():
                    if s[nd[0]] > s[nd[-1]]:
                        nd = nd[::-1]
                    segs.append(nd)
        segs = np.array(segs, dtype=int).reshape(-1, p + 1)
        segs = segs[np.argsort(s[segs[:, 0]])]
        edge_segments.append(segs)
    return edge_nodes, edge_params, edge_segments


def build_template(spec: TemplateSpec, name: str = "") -> SubdomainTemplate:
    """Mesh one unit cell according to `spec`."""
    if spec.order < 1:
        raise GeometryError("polynomial order must be >= 1")
    if spec.symmetry not in SYMMETRY_SIDES:
        raise GeometryError(f"unknown symmetry {spec.symmetry!r}")
    if spec.kind not in ("rod", "plain", "pml"):
        raise GeometryError(f"unknown template kind {spec.kind!r}")
    nsd = SYMMETRY_SIDES[spec.symmetry]
    a = spec.cell_size
    apothem = 0.5 * a
    poly = regular_polygon(nsd, apothem)
    side = np.linalg.norm(poly[1] - poly[0])
    p = spec.order
    hh = spec.h * a
    m = spec.n_side or max(1, int(np.ceil(side / hh - 1e-9)))

    if spec.kind == "rod":
        if spec.R0 is None:
            raise GeometryError("rod template needs R0")
        R0 = spec.R0 * a
        ell = (spec.ell if spec.ell is not None else 0.25 * spec.R0) * a
        if R0 >= apothem:
            raise GeometryError("R0 must be smaller than the cell half-width")
        if ell >= R0 or ell <= 0:
            raise GeometryError("inner box half-length must satisfy 0 < ell < R0")
        if ell / np.cos(np.pi / nsd) >= R0:
            raise GeometryError("inner box corners must lie inside the circle")
        n_in = spec.n_in or max(1, int(np.ceil((R0 - ell) / hh - 1e-9)))
        n_out = spec.n_out or max(1, int(np.ceil((apothem - R0) / hh - 1e-9)))
        pts, elems, region, sector = _mesh_sectors(spec, poly, apothem, p, m, R0, ell,
                                                   n_in, n_out)
    elif spec.symmetry == "square":
        pts, elems, region, sector = _mesh_plain_square(spec, apothem, m, p)
    else:
        ell = 0.5 * apothem
        n_in = spec.n_in or max(1, int(np.ceil((apothem - ell) / hh - 1e-9)))
        pts, elems, region, sector = _mesh_sectors(spec, poly, apothem, p, m, None, ell,
                                                   n_in, 0)
        region[:] = 2

    tol = 1e-10 * a
    nodes, inv = _merge_points(pts, tol)
    elems = inv[elems]
    if spec.kind == "rod":
        eps = np.where(region <= 1, spec.eps_in, spec.eps_out)
    else:
        eps = np.full(len(elems), spec.eps_out)
    edge_nodes, edge_params, edge_segments = _boundary_structure(nodes, elems, p, poly,
                                                                 1e-9 * a)
    if spec.kind == "plain" or spec.kind == "pml":
        # sector of a straight-sided cell is only meaningful for the radial map
        if spec.symmetry == "square":
            sector = -np.ones(len(elems), dtype=int)
    mesh = HighOrderMesh(nodes=nodes, elements=elems, order=p, polygon=poly,
                         edge_nodes=edge_nodes, edge_params=edge_params,
                         edge_segments=edge_segments, elem_region=region,
                         elem_sector=sector, elem_eps=eps.astype(float))
    if mesh.min_jacobian() <= 0:
        raise GeometryError("mesh has non-positive Jacobians")
    return SubdomainTemplate(spec=spec, mesh=mesh, name=name or spec.kind)


def export_mesh(mesh: HighOrderMesh, path, offset=None, rotation: float = 0.0) -> None:
    """Plain-text dump: node lines `x y`, then element lines of node indices."""
    c, s = np.cos(rotation), np.sin(rotation)
    xy = mesh.nodes @ np.array([[c, s], [-s, c]])
    if offset is not None:
        xy = xy + np.asarray(offset)
    with open(path, "w") as fh:
        fh.write(f"# nodes {len(xy)}\n")
        np.savetxt(fh, xy, fmt="%.12e")
        fh.write(f"# elements {len(mesh.elements)} order {mesh.order}\n")
        np.savetxt(fh, mesh.elements, fmt="%d")


# --------------------------------------------------------------------------
# lattice layouts
# --------------------------------------------------------------------------


@dataclass
class Instance:
    template: str
    center: np.ndarray
    rotation: int = 0
    slot: Optional[int] = None
    row: int = 0
    col: int = 0


@dataclass
class LatticeLayout:
    templates: dict
    instances: list
    symmetry: str = "square"
    cell_size: float = 1.0
    shape: tuple = (1, 1)

    @property
    def M(self) -> int:
        return len(self.instances)

    @property
    def rotation_unit(self) -> float:
        return 2 * np.pi / SYMMETRY_SIDES[self.symmetry]

    def rotation_matrix(self, inst: Instance) -> np.ndarray:
        t = inst.rotation * self.rotation_unit
        c, s = np.cos(t), np.sin(t)
        return np.array([[c, -s], [s, c]])

    def to_global(self, inst: Instance, X: np.ndarray) -> np.ndarray:
        return X @ self.rotation_matrix(inst).T + inst.center

    def instance_polygon(self, inst: Instance) -> np.ndarray:
        return self.to_global(inst, self.templates[inst.template].mesh.polygon)

    def template_of(self, inst: Instance) -> SubdomainTemplate:
        return self.templates[inst.template]

    def n_classes(self) -> int:
        return len({self.templates[i.template].key for i in self.instances})

    def slots(self) -> list:
        return sorted({i.slot for i in self.instances if i.slot is not None})

    def find(self, row: int, col: int) -> int:
        for k, inst in enumerate(self.instances):
            if inst.row == row and inst.col == col:
                return k
        raise KeyError((row, col))


def build_lattice(templates: dict, grid, rotations=None, slots=None,
                  symmetry: str = "square", cell_size: float = 1.0,
                  origin=(0.0, 0.0)) -> LatticeLayout:
    """Place templates on a lattice. grid[row][col] names a template; row 0 is
    the bottom row. Hexagonal (triangular-symmetry) rows are offset by a/2 on odd
    rows."""
    rows = len(grid)
    cols = len(grid[0]) if rows else 0
    if any(len(r) != cols for r in grid):
        raise GeometryError("layout grid must be rectangular")
    instances = []
    for r in range(rows):
        for c in range(cols):
            tid = grid[r][c]
            if tid is None:
                continue
            if tid not in templates:
                raise GeometryError(f"unknown template {tid!r}")
            t = templates[tid]
            if t.spec.symmetry != symmetry:
                raise GeometryError(f"template {tid!r} symmetry mismatches the lattice")
            if abs(t.spec.cell_size - cell_size) > 1e-12 * cell_size:
                raise GeometryError(f"template {tid!r} cell size mismatches the lattice")
            if symmetry == "square":
                center = np.array([c * cell_size, r * cell_size])
            else:
                center = np.array([(c + 0.5 * (r % 2)) * cell_size,
                                   r * cell_size * np.sqrt(3) / 2])
            rot = 0 if rotations is None else int(rotations[r][c])
            slot = None if slots is None else slots[r][c]
            instances.append(Instance(tid, center + np.asarray(origin, float), rot,
                                      None if slot is None else int(slot), r, c))
    layout = LatticeLayout(dict(templates), instances, symmetry, cell_size, (rows, cols))
    _check_conforming(layout)
    return layout


def _check_conforming(layout: LatticeLayout) -> None:
    """Neighbouring cells must share whole faces (no hanging vertices)."""
    verts, edges = [], []
    for inst in layout.instances:
        P = layout.instance_polygon(inst)
        verts.append(P)
        for j in range(len(P)):
            edges.append((P[j], P[(j + 1) % len(P)]))
    V = np.vstack(verts)
    tol = 1e-9 * layout.cell_size
    uniq, _ = _merge_points(V, tol)
    tree = cKDTree(uniq)
    for a, b in edges:
        L = np.linalg.norm(b - a)
        mid = 0.5 * (a + b)
        for k in tree.query_ball_point(mid, 0.5 * L + tol):
            v = uniq[k]
            t = (v - a) @ (b - a) / L ** 2
            dist = abs((v - a)[0] * (b - a)[1] - (v - a)[1] * (b - a)[0]) / L
            if dist < tol and tol / L < t < 1 - tol / L:
                raise GeometryError(
                    f"non-conforming faces: vertex {v} lies inside face {a}->{b}")


# --------------------------------------------------------------------------
# skeleton
# --------------------------------------------------------------------------


@dataclass
class Face:
    index: int
    v0: int
    v1: int
    x0: np.ndarray
    x1: np.ndarray
    owners: list  # (instance, template edge, reversed)
    order: int = 1
    n_elem: int = 1
    bc: str = "interior"
    interior_dofs: np.ndarray = None

    @property
    def exterior(self) -> bool:
        return len(self.owners) == 1

    @property
    def length(self) -> float:
        return float(np.linalg.norm(self.x1 - self.x0))

    def node_params(self) -> np.ndarray:
        """Positions in [0, 1] of the 1D face nodes, canonical direction."""
        s = fem.cgl_nodes(self.order)
        out = [0.0]
        for e in range(self.n_elem):
            out.extend((e + s[1:]) / self.n_elem)
        return np.array(out)

    def dofs(self) -> np.ndarray:
        return np.concatenate([[self.v0], self.interior_dofs, [self.v1]]).astype(int)


@dataclass
class EdgeLayout:
    """Per template edge (order, n_elem) seen by one instance; hashable."""

    edges: tuple

    def n_local(self, n_vertices: int) -> int:
        return n_vertices + sum(n * p - 1 for p, n in self.edges)

    def edge_local_dofs(self, j: int) -> np.ndarray:
        nv = len(self.edges)
        start = nv + sum(n * p - 1 for p, n in self.edges[:j])
        p, n = self.edges[j]
        inner = np.arange(start, start + n * p - 1)
        return np.concatenate([[j], inner, [(j + 1) % nv]]).astype(int)

    def edge_node_params(self, j: int) -> np.ndarray:
        p, n = self.edges[j]
        s = fem.cgl_nodes(p)
        out = [0.0]
        for e in range(n):
            out.extend((e + s[1:]) / n)
        return np.array(out)

    def __hash__(self):
        return hash(self.edges)


@dataclass
class SkeletonSpace:
    layout: LatticeLayout
    vertices: np.ndarray
    faces: list
    n_dofs: int
    dof_coords: np.ndarray
    dirichlet: np.ndarray  # bool mask
    instance_dofs: list  # local-to-global per instance
    instance_edges: list  # EdgeLayout per instance
    instance_faces: list  # face index per template edge, per instance

    @property
    def free(self) -> np.ndarray:
        return np.where(~self.dirichlet)[0]


def default_face_rule(order: int = 10, n_elem: int = 1):
    def rule(face: Face):
        return order, n_elem
    return rule


def build_skeleton(layout: LatticeLayout, face_order_rule=None, bc_rule=None) -> SkeletonSpace:
    """Number the multiplier space on all subdomain faces.

    `face_order_rule(face) -> (p_f, N)`; `bc_rule(face) -> 'dirichlet'|'neumann'`
    for exterior faces (default Dirichlet everywhere).
    """
    face_order_rule = face_order_rule or default_face_rule()
    tol = 1e-9 * layout.cell_size
    polys = [layout.instance_polygon(i) for i in layout.instances]
    allv = np.vstack(polys)
    verts, inv = _merge_points(allv, tol)
    # deterministic vertex numbering: sort by (y, x)
    order = np.lexsort((verts[:, 0], verts[:, 1]))
    rank = np.empty_like(order)
    rank[order] = np.arange(len(order))
    verts = verts[order]
    inv = rank[inv]
    vid, k = [], 0
    for P in polys:
        vid.append(inv[k:k + len(P)])
        k += len(P)

    face_map, faces = {}, []
    inst_faces = []
    for m, ids in enumerate(vid):
        nv = len(ids)
        fl = []
        for j in range(nv):
            a, b = int(ids[j]), int(ids[(j + 1) % nv])
            key = (min(a, b), max(a, b))
            if key not in face_map:
                face_map[key] = len(faces)
                faces.append(Face(len(faces), key[0], key[1], verts[key[0]], verts[key[1]], []))
            f = faces[face_map[key]]
            f.owners.append((m, j, a > b))
            fl.append(f.index)
        inst_faces.append(fl)
    for f in faces:
        if len(f.owners) > 2:
            raise GeometryError("face shared by more than two cells")
    n_dofs = len(verts)
    coords = [v for v in verts]
    for f in faces:
        pf, N = face_order_rule(f)
        if pf < 1 or N < 1:
            raise GeometryError("face order and subdivision must be >= 1")
        f.order, f.n_elem = int(pf), int(N)
        n_int = f.n_elem * f.order - 1
        f.interior_dofs = np.arange(n_dofs, n_dofs + n_int)
        n_dofs += n_int
        s = f.node_params()[1:-1]
        coords.extend(f.x0 + np.outer(s, f.x1 - f.x0))
        if f.exterior:
            f.bc = (bc_rule(f) if bc_rule else "dirichlet")
            if f.bc not in ("dirichlet", "neumann"):
                raise GeometryError(f"unknown boundary condition {f.bc!r}")
    dirichlet = np.zeros(n_dofs, dtype=bool)
    for f in faces:
        if f.exterior and f.bc == "dirichlet":
            dirichlet[f.dofs()] = True

    inst_dofs, inst_edges = [], []
    for m, fl in enumerate(inst_faces):
        nv = len(fl)
        layout_e = EdgeLayout(tuple((faces[fi].order, faces[fi].n_elem) for fi in fl))
        loc = np.zeros(layout_e.n_local(nv), dtype=int)
        loc[:nv] = vid[m]
        for j, fi in enumerate(fl):
            f = faces[fi]
            rev = [o[2] for o in f.owners if o[0] == m and o[1] == j][0]
            inner = f.interior_dofs[::-1] if rev else f.interior_dofs
            loc[layout_e.edge_local_dofs(j)[1:-1]] = inner
        inst_dofs.append(loc)
        inst_edges.append(layout_e)
    return SkeletonSpace(layout, verts, faces, n_dofs, np.array(coords), dirichlet,
                         inst_dofs, inst_edges, inst_faces)


# --------------------------------------------------------------------------
# trace projection
# --------------------------------------------------------------------------


def _face_basis(layout_e: EdgeLayout, j: int, s: np.ndarray) -> np.ndarray:
    """Piecewise CGL-Lagrange face basis of template edge j at params s."""
    p, n = layout_e.edges[j]
    nodes = fem.cgl_nodes(p)
    out = np.zeros((len(s), n * p + 1))
    e = np.minimum((np.asarray(s) * n).astype(int), n - 1)
    for k in range(n):
        sel = e == k
        if sel.any():
            out[np.ix_(sel, np.arange(k * p, k * p + p + 1))] = fem.lagrange_1d(
                nodes, s[sel] * n - k)
    return out


def _edge_trace_l2(mesh: HighOrderMesh, layout_e: EdgeLayout, j: int):
    """(trace mass, face-trace coupling) on template edge j, in edge-node order."""
    key = ("trace_l2", layout_e.edges, j)
    if key not in mesh._geom:
        out = _edge_trace_l2_build(mesh, layout_e, j)
        for a in out:
            a.setflags(write=False)
        mesh._geom[key] = out
    return mesh._geom[key]


def _edge_trace_l2_build(mesh: HighOrderMesh, layout_e: EdgeLayout, j: int):
    ids = mesh.edge_nodes[j]
    spos = {nd: i for i, nd in enumerate(ids)}
    params = mesh.edge_params[j]
    p = mesh.order
    pf, nf = layout_e.edges[j]
    nb = len(ids)
    nface = nf * pf + 1
    Mb = np.zeros((nb, nb))
    E = np.zeros((nb, nface))
    brk = np.unique(np.concatenate([params, np.arange(nf + 1) / nf]))
    xg, wg = fem.gauss_legendre_01((p + pf) // 2 + 2)
    for seg in mesh.edge_segments[j]:
        loc = [spos[n] for n in seg]
        sn = params[loc]
        lo, hi = sn[0], sn[-1]
        cuts = brk[(brk > lo + 1e-14) & (brk < hi - 1e-14)]
        pts = np.concatenate([[lo], cuts, [hi]])
        for a, b in zip(pts[:-1], pts[1:]):
            sq = a + (b - a) * xg
            w = (b - a) * wg
            Bq = fem.lagrange_1d(sn, sq)
            Fq = _face_basis(layout_e, j, sq)
            Mb[np.ix_(loc, loc)] += Bq.T @ (w[:, None] * Bq)
            E[loc] += Bq.T @ (w[:, None] * Fq)
    return Mb, E


def trace_projection(template: SubdomainTemplate, layout_e: EdgeLayout) -> np.ndarray:
    """Matrix from local face coefficients to template boundary-node values.

    Interpolation when an edge carries at least as many trace nodes as face
    nodes, otherwise L2 projection onto the trace space with the cell-corner
    values pinned (keeps corner values single-valued).
    Rows follow ``template.mesh.boundary_nodes()``.
    """
    mesh = template.mesh
    key = ("trace", layout_e.edges)
    if key not in mesh._geom:
        T = _trace_projection_build(template, layout_e)
        T.setflags(write=False)
        mesh._geom[key] = T
    return mesh._geom[key]


def _trace_projection_build(template: SubdomainTemplate, layout_e: EdgeLayout) -> np.ndarray:
    mesh = template.mesh
    nv = len(mesh.polygon)
    if len(layout_e.edges) != nv:
        raise GeometryError("edge layout does not match the template polygon")
    bnodes = mesh.boundary_nodes()
    row = {n: i for i, n in enumerate(bnodes)}
    T = np.zeros((len(bnodes), layout_e.n_local(nv)))
    for j in range(nv):
        ids = mesh.edge_nodes[j]
        s = mesh.edge_params[j]
        cols = layout_e.edge_local_dofs(j)
        rows = [row[n] for n in ids]
        pf, nf = layout_e.edges[j]
        if len(ids) >= nf * pf + 1:
            T[np.ix_(rows, cols)] = _face_basis(layout_e, j, s)
            continue
        Mb, E = _edge_trace_l2(mesh, layout_e, j)
        Tj = np.zeros((len(ids), len(cols)))
        Tj[0, 0] = 1.0
        Tj[-1, -1] = 1.0
        I = np.arange(1, len(ids) - 1)
        Ex = np.array([0, len(ids) - 1])
        if len(I):
            rhs = E[I] - Mb[np.ix_(I, Ex)] @ Tj[Ex]
            Tj[I] = np.linalg.solve(Mb[np.ix_(I, I)], rhs)
        T[np.ix_(rows, cols)] = Tj
    return T


def check_face_lengths(template: SubdomainTemplate, lengths) -> None:
    poly = template.mesh.polygon
    for j, L in enumerate(lengths):
        Lt = np.linalg.norm(poly[(j + 1) % len(poly)] - poly[j])
        if abs(Lt - L) > 1e-9 * Lt:
            raise GeometryError(f"face {j} length {L} does not match template edge {Lt}")
