import dataclasses

import numpy as np
import pytest

from harmcoords.errors import TopologyError
from harmcoords.mesh import SurfaceMesh
from harmcoords.uniformize import (certify_uniformization, gauss_equation_check, sphere_fit, uniformize)

from conftest import Setup


def torus_surface(n=12, m=8, R=1.0, r=0.4):
    """Triangulated torus; only the combinatorial fields matter for the topology check."""
    u, v = np.meshgrid(np.arange(n), np.arange(m), indexing="ij")
    a, b = 2 * np.pi * u.ravel() / n, 2 * np.pi * v.ravel() / m
    verts = np.column_stack([(R + r * np.cos(b)) * np.cos(a), (R + r * np.cos(b)) * np.sin(a), r * np.sin(b)])
    idx = lambda i, j: (i % n) * m + (j % m)  # noqa: E731
    tris = []
    for i in range(n):
        for j in range(m):
            tris += [[idx(i, j), idx(i + 1, j), idx(i + 1, j + 1)], [idx(i, j), idx(i + 1, j + 1), idx(i, j + 1)]]
    tris = np.array(tris)
    e = np.sort(np.concatenate([tris[:, [0, 1]], tris[:, [1, 2]], tris[:, [2, 0]]]), axis=1)
    edges, inv = np.unique(e, axis=0, return_inverse=True)
    tri_edges = inv.reshape(3, -1).T
    chi = len(verts) - len(edges) + len(tris)
    return SurfaceMesh(verts, tris, np.arange(len(verts)), np.ones(len(verts)), edges, tri_edges, int(chi), 1)


def test_torus_rejected(flat05):
    s = torus_surface()
    assert s.euler_characteristic == 0
    with pytest.raises(TopologyError):
        uniformize(s, flat05.bg)
    two = dataclasses.replace(flat05.mesh.boundary, n_components=2)
    with pytest.raises(TopologyError):
        uniformize(two, flat05.bg)


def test_sphere_fit_exact():
    pts = np.random.default_rng(0).normal(size=(50, 3))
    pts = 1.7 * pts / np.linalg.norm(pts, axis=1)[:, None] + [0.1, -0.2, 0.3]
    c, R, res = sphere_fit(pts)
    assert np.allclose(c, [0.1, -0.2, 0.3], atol=1e-12) and R == pytest.approx(1.7) and res < 1e-12


def test_flat_boundary_is_its_own_uniformization(flat03):
    cm = uniformize(flat03.mesh.boundary, flat03.bg)
    assert np.abs(cm.images - flat03.bg.surface.vertices).max() <= 1e-9
    assert np.abs(cm.phi - 1.0).max() <= 1e-9
    assert cm.quality["cospherical_start"]


def test_radius2_factor_is_two():
    s = Setup(0.6, radius=2.0)
    cm = uniformize(s.mesh.boundary, s.bg)
    assert np.abs(cm.phi - 2.0).max() <= 1e-8
    assert cm.quality["unit_length_error"] <= 1e-12


def test_conformal_flow(conf03):
    s = conf03
    cm = uniformize(s.mesh.boundary, s.bg)
    h = s.mesh.h
    assert np.abs(cm.phi - 1.0).max() <= 5 * h
    assert np.all(np.diff(cm.energies) <= 1e-12 * np.abs(cm.energies[0]))
    assert cm.quality["unit_length_error"] <= 1e-12
    cert = certify_uniformization(cm, s.bg, s.ctx, eps_scale=0.02)
    assert cert["total_curvature"] == pytest.approx(4 * np.pi, abs=1e-10)
    assert cert["phi_minus_one_sup_ratio"] == pytest.approx(cert["phi_minus_one_sup"] / 0.02)
    assert np.isfinite(cert["conformal_factor_residual"])


def test_gauss_residual_shrinks_on_flat_ball():
    vals = [gauss_equation_check(Setup(h).bg)["L2"].value for h in (0.5, 0.3)]
    assert vals[1] < vals[0]
