import numpy as np
import pytest

from harmcoords.errors import MetricError
from harmcoords.metric import (christoffel, conformal_profile, curvature, make_metric, riemann_from_ricci,
                               riemann_norm2)

from conftest import Setup

PTS = np.array([[0.1, -0.2, 0.3], [0.5, 0.1, -0.4], [-0.3, 0.6, 0.2], [0.0, 0.0, 0.0]])
E = np.eye(3)


def fd(fn, x, step=1e-3):
    """Fourth-order central differences of fn at points x, derivative index first after the point axis."""
    cols = []
    for k in range(3):
        d = step * E[k]
        cols.append((-fn(x + 2 * d) + 8 * fn(x + d) - 8 * fn(x - d) + fn(x - 2 * d)) / (12 * step))
    return np.stack(cols, axis=1)


def g_of(metric):
    return lambda x: metric.evaluate(x, order=0, check=False)[0]


def fd_christoffel(metric, x, step=1e-3):
    g = g_of(metric)(x)
    dg = fd(g_of(metric), x, step)  # (n, k, i, j) = d_k g_ij
    first = 0.5 * (np.einsum("nijm->nmij", dg) + np.einsum("njim->nmij", dg) - dg)
    return np.einsum("nkm,nmij->nkij", np.linalg.inv(g), first)


def test_flat_is_identity():
    m = make_metric("flat")
    g, dg, d2g = m.evaluate(PTS)
    assert np.array_equal(g, np.broadcast_to(E, g.shape))
    assert not dg.any() and not d2g.any()
    c = curvature(m, PTS)
    assert not c.riemann.any() and not c.ricci.any() and not c.scalar.any()


def test_conformal_eps0_equals_flat():
    a = make_metric("conformal", 0.0).evaluate(PTS)
    b = make_metric("flat").evaluate(PTS)
    for x, y in zip(a, b):
        assert np.array_equal(x, y)


def test_conformal_first_derivative_closed_form():
    eps = 0.01
    m = make_metric("conformal", eps)
    f, df, _ = conformal_profile(PTS)
    _, dg, _ = m.evaluate(PTS)
    ref = (2 * eps * df * np.exp(2 * eps * f)[:, None])[:, :, None, None] * E
    assert np.allclose(dg, ref, atol=1e-15)
    assert np.allclose(dg, fd(g_of(m), PTS), atol=1e-10)


@pytest.mark.parametrize("family", ["conformal", "bump-tensor"])
def test_second_derivatives_by_differences(family):
    m = make_metric(family, 0.05)
    _, _, d2g = m.evaluate(PTS)
    ref = fd(lambda x: m.evaluate(x, order=1, check=False)[1], PTS)
    assert np.allclose(d2g, ref, atol=1e-9)


def test_conformal_christoffel_symbols():
    eps = 0.02
    m = make_metric("conformal", eps)
    _, df, _ = conformal_profile(PTS)
    du = eps * df
    ref = (np.einsum("ki,nj->nkij", E, du) + np.einsum("kj,ni->nkij", E, du) - np.einsum("ij,nk->nkij", E, du))
    assert np.allclose(christoffel(m, PTS), ref, atol=1e-14)


@pytest.mark.parametrize("family", ["conformal", "bump-tensor"])
def test_christoffel_trace_is_log_volume_gradient(family):
    m = make_metric(family, 0.05)
    gam = christoffel(m, PTS)
    trace = np.einsum("nkik->ni", gam)
    ref = fd(lambda x: 0.5 * np.log(np.linalg.det(g_of(m)(x))), PTS)
    assert np.allclose(trace, ref, atol=1e-10)


@pytest.mark.parametrize("family", ["conformal", "bump-tensor"])
def test_ricci_against_finite_differences(family):
    m = make_metric(family, 0.02)
    gam = fd_christoffel(m, PTS)
    dgam = fd(lambda x: fd_christoffel(m, x), PTS, step=1e-2)  # (n, l, k, i, j) = d_l Gamma^k_ij
    # R_jk = d_i Gamma^i_jk - d_k Gamma^i_ij + Gamma^i_ip Gamma^p_jk - Gamma^i_kp Gamma^p_ij
    ric = (np.einsum("niijk->njk", dgam) - np.einsum("nkiij->njk", dgam)
           + np.einsum("niip,npjk->njk", gam, gam) - np.einsum("nikp,npij->njk", gam, gam))
    got = curvature(m, PTS).ricci
    assert np.abs(got - ric).max() <= 1e-6
    assert np.abs(got).max() > 1e-3


def test_einstein_divergence_free():
    m = make_metric("bump-tensor", 0.05)
    x = PTS[:3]
    G = lambda p: curvature(m, p).einstein  # noqa: E731
    dG = fd(G, x, step=1e-3)               # (n, k, i, j)
    g = m.evaluate(x)[0]
    gam = christoffel(m, x)
    Gx = G(x)
    cov = dG - np.einsum("nmki,nmj->nkij", gam, Gx) - np.einsum("nmkj,nim->nkij", gam, Gx)
    div = np.einsum("nki,nkij->nj", np.linalg.inv(g), cov)
    assert np.abs(div).max() <= 1e-7
    assert np.abs(Gx).max() > 1e-2


def test_three_dimensional_riemann_from_ricci():
    m = make_metric("bump-tensor", 0.05)
    c = curvature(m, PTS)
    assert np.allclose(riemann_from_ricci(c.ricci, m.evaluate(PTS)[0]), c.riemann, atol=1e-12)
    ginv = np.linalg.inv(m.evaluate(PTS)[0])
    ref = np.einsum("nai,nbj,nck,ndl,nijkl,nabcd->n", ginv, ginv, ginv, ginv, c.riemann, c.riemann)
    assert np.allclose(riemann_norm2(c.riemann, ginv), ref, rtol=1e-12)


def test_rotation_equivariance():
    th = 0.7
    R = np.array([[np.cos(th), -np.sin(th), 0], [np.sin(th), np.cos(th), 0], [0, 0, 1.0]])
    m, mr = make_metric("bump-tensor", 0.05), make_metric("bump-tensor", 0.05, rotation=R)
    s0 = curvature(m, PTS).scalar
    s1 = curvature(mr, PTS @ R.T).scalar
    assert np.allclose(s0, s1, atol=1e-12)


def test_metric_errors():
    with pytest.raises(MetricError):
        make_metric("bump-tensor", 5.0)
    with pytest.raises(MetricError):
        make_metric("nope")
    with pytest.raises(MetricError):
        make_metric("conformal", -0.1)


def test_flat_unit_ball_boundary(flat03):
    bg = flat03.bg
    h = flat03.mesh.h
    assert np.abs(bg.tr_theta - 2.0).max() <= h
    assert np.abs(bg.theta - bg.gb).max() <= h * np.abs(bg.gb).max()
    assert bg.angle_defect.sum() == pytest.approx(4 * np.pi, abs=1e-12)
    assert np.abs(bg.vertex_K - 1.0).max() <= h
    assert np.allclose(np.linalg.norm(bg.vertex_normals - bg.surface.vertices, axis=1), 0.0, atol=h**2)


def test_radius2_ball_mean_curvature():
    s = Setup(0.6, radius=2.0)
    assert s.bg.integrate(s.bg.tr_theta) / s.bg.area == pytest.approx(1.0, abs=0.01)
    assert s.bg.angle_defect.sum() == pytest.approx(4 * np.pi, abs=1e-12)
