import numpy as np
import pytest

from mscg.geometry import (EdgeLayout, GeometryError, TemplateSpec, build_lattice,
                           build_skeleton, build_template, export_mesh, trace_projection)
from mscg.geometry import _face_basis


def mesh_area(t):
    geo = t.mesh.geometry()
    return float(np.sum(geo["wts"][None, :] * geo["detJ"]))


def test_rod_template_fills_cell(rod_template):
    assert mesh_area(rod_template) == pytest.approx(1.0, rel=1e-12)
    assert rod_template.mesh.min_jacobian() > 0
    inside = rod_template.mesh.elem_region <= 1
    geo = rod_template.mesh.geometry()
    area_in = np.sum((geo["wts"][None, :] * geo["detJ"])[inside])
    # curved isoparametric P2 rod: area converges fast to pi R0^2
    assert area_in == pytest.approx(np.pi * 0.2 ** 2, rel=1e-4)


def test_hexagonal_template_area(hex_rod_template):
    a = 1.0
    assert mesh_area(hex_rod_template) == pytest.approx(np.sqrt(3) / 2 * a * a, rel=1e-12)
    assert len(hex_rod_template.mesh.polygon) == 6


def test_edge_nodes_sorted_and_cover_corners(rod_template):
    m = rod_template.mesh
    for j, (ids, s) in enumerate(zip(m.edge_nodes, m.edge_params)):
        assert s[0] == pytest.approx(0.0) and s[-1] == pytest.approx(1.0)
        assert np.all(np.diff(s) > 0)
        np.testing.assert_allclose(m.nodes[ids[0]], m.polygon[j], atol=1e-12)
        np.testing.assert_allclose(m.nodes[ids[-1]], m.polygon[(j + 1) % 4], atol=1e-12)


@pytest.mark.parametrize("bad", [dict(R0=0.5), dict(R0=0.2, ell=0.3), dict(order=0)])
def test_invalid_templates_rejected(bad):
    kw = dict(kind="rod", symmetry="square", cell_size=1.0, R0=0.2, order=2, h=0.2)
    kw.update(bad)
    with pytest.raises(GeometryError):
        build_template(TemplateSpec(**kw))


def test_unknown_template_kind_rejected():
    with pytest.raises(GeometryError):
        build_template(TemplateSpec(kind="hole", symmetry="square"))


@pytest.mark.parametrize("pf", [1, 2, 4])
def test_trace_projection_reproduces_face_polynomials(plain_template, pf):
    # 5 P2 trace nodes per edge carry any face polynomial of order <= 2 exactly
    t = plain_template
    le = EdgeLayout(((pf, 1),) * 4)
    T = trace_projection(t, le)
    bnodes = t.mesh.boundary_nodes()
    row = {n: i for i, n in enumerate(bnodes)}
    rng = np.random.default_rng(0)
    c = rng.standard_normal(T.shape[1])
    vals = T @ c
    for j in range(4):
        ids = t.mesh.edge_nodes[j]
        s = t.mesh.edge_params[j]
        cols = le.edge_local_dofs(j)
        ref = _face_basis(le, j, s) @ c[cols]
        np.testing.assert_allclose(vals[[row[n] for n in ids]], ref, atol=1e-12)


def test_skeleton_counts_and_sharing(plain_template):
    grid = [["plain"] * 3 for _ in range(2)]
    lay = build_lattice({"plain": plain_template}, grid)
    sk = build_skeleton(lay, lambda f: (5, 1))
    assert len(sk.vertices) == 12
    assert len(sk.faces) == 17
    assert sum(f.exterior for f in sk.faces) == 10
    assert sk.n_dofs == 12 + 17 * 4
    for f in sk.faces:
        assert len(f.owners) in (1, 2)
    # neighbouring instances share the dofs of their common face
    shared = set(sk.instance_dofs[0]) & set(sk.instance_dofs[1])
    assert len(shared) == 2 + 4


def test_lattice_rejects_mismatched_cell_size(plain_template):
    with pytest.raises(GeometryError):
        build_lattice({"plain": plain_template}, [["plain"]], cell_size=2.0)


def test_lattice_rotation_maps_template_frame(plain_template):
    lay = build_lattice({"plain": plain_template}, [["plain", "plain"]], rotations=[[0, 1]])
    inst = lay.instances[1]
    x = lay.to_global(inst, np.array([[0.5, 0.0]]))
    np.testing.assert_allclose(x, [[1.0, 0.5]], atol=1e-12)


def test_export_mesh_roundtrip(tmp_path, plain_template):
    path = tmp_path / "mesh.txt"
    export_mesh(plain_template.mesh, path)
    text = path.read_text().splitlines()
    nn = int(text[0].split()[-1])
    assert nn == plain_template.mesh.n_nodes
    xy = np.loadtxt(text[1:1 + nn])
    np.testing.assert_allclose(xy, plain_template.mesh.nodes, atol=1e-11)
