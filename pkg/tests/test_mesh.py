import math

import numpy as np
import pytest

from cradapt.mesh import (MeshError, TriMesh, check_invariants, diameter, load_mesh,
                          make_square_ring, make_unit_square, perimeter, refine, save_mesh,
                          uniform_refine, vertex_patch)


@pytest.mark.parametrize("n, tris, verts, edges", [(1, 2, 4, 5), (2, 8, 9, 16), (4, 32, 25, 56)])
def test_unit_square_counts(n, tris, verts, edges):
    m = make_unit_square(n)
    assert (m.n_triangles, m.n_vertices, m.n_edges) == (tris, verts, edges)
    assert m.n_vertices - m.n_edges + m.n_triangles == 1
    assert check_invariants(m, area=1.0, perimeter=4.0) == []


def test_vertex_patches_structured_square():
    m = make_unit_square(2)
    centre = int(np.flatnonzero(np.all(np.isclose(m.vertices, 0.5), axis=1))[0])
    corner = int(np.flatnonzero(np.all(m.vertices == 0.0, axis=1))[0])
    side = int(np.flatnonzero(np.all(np.isclose(m.vertices, [0.5, 0.0]), axis=1))[0])
    assert len(vertex_patch(m, centre)) == 6
    assert len(vertex_patch(m, corner)) == 1
    assert len(vertex_patch(m, side)) == 3


def test_square_ring_geometry():
    m = make_square_ring()
    assert m.area == pytest.approx(8 / 9, rel=1e-14)
    assert np.all(m.signed_areas > 0)
    assert m.holes == 1 and m.euler_characteristic() == 0
    assert perimeter(m) == pytest.approx(4 + 4 / 3)
    bv = {tuple(np.round(p, 12)) for p in m.vertices[m.boundary_vertices]}
    for c in [(0, 0), (1, 0), (1, 1), (0, 1), (1 / 3, 1 / 3), (2 / 3, 1 / 3),
              (2 / 3, 2 / 3), (1 / 3, 2 / 3)]:
        assert tuple(np.round(c, 12)) in bv
    # invariant under (x, y) -> (y, x)
    pts = {tuple(np.round(p, 12)) for p in m.vertices}
    assert pts == {tuple(np.round(p[::-1], 12)) for p in m.vertices}
    assert check_invariants(m, area=8 / 9, perimeter=4 + 4 / 3) == []


def test_diameter_examples():
    right = TriMesh(np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]]), np.array([[0, 1, 2]]))
    assert diameter(right, 0) == pytest.approx(math.sqrt(2))
    s = 0.7
    eq = TriMesh(np.array([[0.0, 0.0], [s, 0.0], [s / 2, s * math.sqrt(3) / 2]]),
                 np.array([[0, 1, 2]]))
    assert diameter(eq, 0) == pytest.approx(s)
    # refinement edge of the right triangle is the hypotenuse (opposite vertex 0)
    child = refine(TriMesh(right.vertices, np.array([[0, 1, 2]])), [0])
    assert child.n_triangles == 2
    assert np.allclose(child.diameters, 1.0)


def test_refine_empty_marking_is_identity():
    m = make_square_ring()
    r = refine(m, [])
    assert np.array_equal(r.vertices, m.vertices)
    assert np.array_equal(r.triangles, m.triangles)


def test_refine_single_triangle_stays_conforming():
    m = make_unit_square(1)
    r = refine(m, [0])
    assert r.n_triangles >= 3
    assert check_invariants(r, area=1.0, perimeter=4.0) == []
    assert (r.edge_triangles >= 0).sum(axis=1).max() == 2


def test_uniform_refinement_doubles_and_keeps_angles():
    m = make_square_ring()
    a0 = m.min_angle()
    for _ in range(6):
        r = refine(m, range(m.n_triangles))
        assert r.n_triangles == 2 * m.n_triangles
        assert r.min_angle() >= a0 - 1e-12
        m = r
    assert check_invariants(m, area=8 / 9, perimeter=4 + 4 / 3) == []


def test_random_refinement_invariants():
    rng = np.random.default_rng(3)
    for seq in range(10):
        m = make_square_ring()
        angles = []
        for step in range(8):
            k = int(rng.integers(1, max(2, m.n_triangles // 4)))
            m = refine(m, rng.choice(m.n_triangles, k, replace=False))
            assert check_invariants(m, area=8 / 9, perimeter=4 + 4 / 3) == []
            assert m.euler_characteristic() == 0
            angles.append(m.min_angle())
        assert min(angles) >= make_square_ring().min_angle() / 2
        # from the fourth generation on the minimum angle never decreases
        assert all(b >= a - 1e-12 for a, b in zip(angles[3:], angles[4:]))


def test_refine_records_parents():
    m = make_unit_square(2)
    r = refine(m, [3])
    assert np.all((r.parent >= 0) & (r.parent < m.n_triangles))
    area_by_parent = np.bincount(r.parent, weights=r.signed_areas, minlength=m.n_triangles)
    assert np.allclose(area_by_parent, m.signed_areas)
    new = r.vertex_parents[m.n_vertices:]
    assert np.allclose(r.vertices[m.n_vertices:],
                       0.5 * (m.vertices[new[:, 0]] + m.vertices[new[:, 1]]))


def test_mesh_round_trip(tmp_path):
    m = refine(make_square_ring(), [0, 7, 11])
    save_mesh(m, tmp_path / "ring.txt")
    back = load_mesh(tmp_path / "ring.txt")
    assert np.array_equal(back.vertices, m.vertices)
    assert np.array_equal(back.triangles, m.triangles)
    assert back.holes == 1
    assert check_invariants(back, area=8 / 9) == []
    # same refinement edges -> same refinement
    assert np.array_equal(refine(back, [2]).triangles, refine(m, [2]).triangles)


def test_load_mesh_reorients_and_reports_errors(tmp_path):
    p = tmp_path / "cw.txt"
    p.write_text("v 0 0\nv 1 0\nv 0 1\nt 0 2 1\n")
    m = load_mesh(p)
    assert m.signed_areas[0] == pytest.approx(0.5)
    bad = tmp_path / "bad.txt"
    bad.write_text("v 0 0\nv 1 0\nq 3\n")
    with pytest.raises(MeshError, match="bad.txt:3"):
        load_mesh(bad)


def test_arrays_are_read_only():
    m = make_unit_square(2)
    with pytest.raises(ValueError):
        m.vertices[0, 0] = 5.0


def test_degenerate_triangle_rejected():
    with pytest.raises(MeshError):
        TriMesh(np.array([[0.0, 0.0], [1.0, 0.0], [2.0, 0.0]]), np.array([[0, 1, 2]]))


def test_uniform_refine_two_sweeps_halves_h():
    m = make_unit_square(4)
    r = uniform_refine(m, 2)
    assert r.n_triangles == 4 * m.n_triangles
    assert r.diameters.max() == pytest.approx(m.diameters.max() / 2)
