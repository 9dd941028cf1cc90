import math

import numpy as np
import pytest

from harmcoords.errors import EmptyBoundaryError, MeshParseError, MeshTopologyError, ResolutionError
from harmcoords.mesh import (build_mesh, extract_boundary, generate_ball_mesh, load_mesh, mesh_summary, save_mesh,
                             simplex_rule, tet_rule)

from conftest import ball

REG_TET = np.array([[1, 1, 1], [1, -1, -1], [-1, 1, -1], [-1, -1, 1]], float)


def test_single_tet():
    m = build_mesh(REG_TET, [[0, 1, 2, 3]])
    assert len(m.boundary_faces) == 4 and m.n_interior_faces == 0
    s = m.boundary
    assert s.euler_characteristic == 2 and s.n_components == 1
    assert len(s.triangles) == 4


def test_orientation_repair():
    m = build_mesh(REG_TET, [[0, 1, 2, 3]])  # negatively oriented as given
    assert m.flipped == 1 and m.volumes.min() > 0
    with pytest.raises(MeshTopologyError):
        build_mesh(REG_TET, [[0, 1, 2, 3]], repair=False)


def test_face_shared_by_three_tets():
    v = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0.2, 0.2, 1], [0.3, 0.1, -1], [0.1, 0.3, 2]], float)
    with pytest.raises(MeshTopologyError):
        build_mesh(v, [[0, 1, 2, 3], [0, 1, 2, 4], [0, 1, 2, 5]])


def test_bad_inputs():
    with pytest.raises(MeshParseError):
        build_mesh(REG_TET, [[0, 1, 2, 7]])
    with pytest.raises(MeshTopologyError):
        build_mesh(REG_TET, [[0, 1, 1, 3]])
    with pytest.raises(MeshTopologyError):
        build_mesh(REG_TET, np.zeros((0, 4), int))
    assert issubclass(EmptyBoundaryError, MeshTopologyError)


def test_two_disjoint_tets():
    v = np.vstack([REG_TET, REG_TET + 5.0])
    m = build_mesh(v, [[0, 1, 2, 3], [4, 5, 6, 7]])
    s = extract_boundary(m)
    assert s.n_components == 2 and s.euler_characteristic == 4


@pytest.mark.parametrize("fmt,suffix", [("native-ascii", ".tet"), ("medit-mesh", ".mesh")])
def test_round_trip(tmp_path, fmt, suffix):
    m = ball(0.3)
    path = tmp_path / f"ball{suffix}"
    save_mesh(m, path, format=fmt)
    r = load_mesh(path)
    assert np.array_equal(r.tets, m.tets)
    assert np.array_equal(r.vertices, m.vertices)
    assert r.flipped == 0


def test_native_boundary_block_checked(tmp_path):
    m = build_mesh(REG_TET, [[0, 1, 2, 3]])
    p = tmp_path / "t.tet"
    save_mesh(m, p)
    lines = p.read_text().splitlines()
    lines[-2] = lines[-1]  # one face listed twice, another missing
    p.write_text("\n".join(lines) + "\n")
    with pytest.raises(MeshTopologyError):
        load_mesh(p)


def test_ball_topology_and_volume():
    m = ball(0.5)
    s = m.boundary
    assert s.euler_characteristic == 2 and s.n_components == 1
    assert np.allclose(np.linalg.norm(s.vertices, axis=1), 1.0, atol=1e-12)
    exact = 4.0 / 3.0 * math.pi
    levels = (0.5, 0.25, 0.18)
    errs = np.array([abs(ball(h).volumes.sum() - exact) for h in levels])
    hs = np.array([ball(h).h for h in levels])
    # inscribed polyhedron: deficit O(h^2), observed order approaching 2
    assert np.all(errs <= hs**2)
    assert np.log(errs[1] / errs[2]) / np.log(hs[1] / hs[2]) >= 1.5
    summ = mesh_summary(m)
    assert summ["tets"] == m.n_tets and summ["euler_characteristic"] == 2


def test_generation_rejects():
    with pytest.raises(ValueError):
        generate_ball_mesh(1.5)
    with pytest.raises(ResolutionError):
        generate_ball_mesh(0.05, budget=1000)


def test_deterministic_generation():
    a, b = generate_ball_mesh(0.5), generate_ball_mesh(0.5)
    assert np.array_equal(a.vertices, b.vertices) and np.array_equal(a.tets, b.tets)


@pytest.mark.parametrize("degree", [1, 2, 3, 5, 8])
def test_quadrature_exactness(degree):
    rule = tet_rule(degree)
    assert rule.weights.sum() == pytest.approx(1.0 / 6.0, rel=1e-14)
    # int lambda_0^a lambda_1^b = a! b! 3! / (a + b + 3)! / 6 on the unit tet
    for a in range(degree + 1):
        b = degree - a
        exact = math.factorial(a) * math.factorial(b) / math.factorial(a + b + 3)
        got = float((rule.weights * rule.points[:, 0] ** a * rule.points[:, 1] ** b).sum())
        assert got == pytest.approx(exact, rel=1e-12)
    tri = simplex_rule(2, degree)
    assert tri.weights.sum() == pytest.approx(0.5, rel=1e-14)
    exact = math.factorial(degree) / math.factorial(degree + 2)
    assert float((tri.weights * tri.points[:, 1] ** degree).sum()) == pytest.approx(exact, rel=1e-12)
