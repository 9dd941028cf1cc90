import numpy as np
import pytest

from harmcoords.errors import MeanValueError, QuadratureError, SolverError
from harmcoords.fem import (DiscreteField, FemSpace, TraceSpace, assemble, assemble_surface, boundary_flux,
                            lagrange_basis, pcg, solve_dirichlet, solve_surface_poisson)
from harmcoords.mesh import TET_EDGES

import oracles as o


def quad_fn(x):
    return x[:, 0] ** 2 - x[:, 1] ** 2 + 0.5 * x[:, 0] * x[:, 2] + x[:, 1]


@pytest.mark.parametrize("order", [1, 2])
def test_basis_partition_of_unity(order):
    lam = np.random.default_rng(0).dirichlet(np.ones(4), size=7)
    phi, dphi = lagrange_basis(order, lam, TET_EDGES)
    assert np.allclose(phi.sum(1), 1.0, atol=1e-14)
    # sum of basis derivatives along any barycentric direction is the derivative of 1 along lam
    assert np.allclose(dphi.sum(1), dphi.sum(1)[:, :1], atol=1e-14)


def test_p2_integrals_against_simplex_formula(flat05):
    s = flat05
    space = FemSpace(s.mesh, 2)
    c = np.random.default_rng(1).normal(size=4)
    # the linear function sum c_a lambda_a on tet 0, squared, integrated exactly by the degree-5 rule
    lam = s.quad.rule.points
    got = float((s.quad.w[0] * (lam @ c) ** 2).sum())
    assert got == pytest.approx(o.simplex_power_integral(c, 2, s.mesh.volumes[0]), rel=1e-12)
    M = assemble(space, s.metric, "mass", s.quad).matrix
    assert M.sum() == pytest.approx(s.mesh.volumes.sum(), rel=1e-12)


def test_stiffness_kernel_and_linear_energy(flat05):
    s = flat05
    space = FemSpace(s.mesh, 2)
    K = assemble(space, s.metric, "dirichlet-energy", s.quad).matrix
    assert np.abs(K @ np.ones(space.n_dofs)).max() <= 1e-12
    x = space.interpolate(lambda p: p[:, 0])
    assert x @ (K @ x) == pytest.approx(s.mesh.volumes.sum(), rel=1e-12)


def test_quadratic_grads_exact(flat05):
    s = flat05
    space = FemSpace(s.mesh, 2)
    u = DiscreteField(space, space.interpolate(quad_fn))
    x = s.quad.x
    ref = np.stack([2 * x[..., 0] + 0.5 * x[..., 2], -2 * x[..., 1] + 1.0, 0.5 * x[..., 0]], axis=-1)
    assert np.abs(u.grads(s.quad) - ref).max() <= 1e-12
    hess = u.covariant_hessian(s.quad)
    ref_h = np.array([[2, 0, 0.5], [0, -2, 0], [0.5, 0, 0]])
    assert np.abs(hess - ref_h).max() <= 1e-11


def test_p2_reproduces_harmonic_quadratic(flat05):
    s = flat05
    space = FemSpace(s.mesh, 2)
    form = assemble(space, s.metric, "dirichlet-energy", s.quad)
    exact = space.interpolate(quad_fn)
    u = solve_dirichlet(form, exact[space.boundary_dofs], tol=1e-13)
    assert np.abs(u.coef - exact).max() <= 1e-9


def test_poisson_load_and_flux_balance(flat05):
    s = flat05
    space = FemSpace(s.mesh, 2)
    form = assemble(space, s.metric, "dirichlet-energy", s.quad)
    exact = space.interpolate(lambda p: -(p**2).sum(1))   # -Laplacian = 6
    load = np.full(space.n_dofs, 6.0)
    u = solve_dirichlet(form, exact[space.boundary_dofs], load=load, tol=1e-13)
    assert np.abs(u.coef - exact).max() <= 1e-9
    trace = TraceSpace(space, s.bg)
    rb, N = boundary_flux(form, u, trace, load=load)
    # the flux sums to int Laplacian u = -6 |M|
    assert rb.sum() == pytest.approx(-6.0 * s.mesh.volumes.sum(), rel=1e-9)
    # outward normal derivative of -|x|^2 is -2 on the unit sphere
    assert abs(np.median(N) + 2.0) <= 0.1


def test_vector_connection_energy_flat_is_componentwise(flat05):
    s = flat05
    space = FemSpace(s.mesh, 1)
    K = assemble(space, s.metric, "dirichlet-energy", s.quad).matrix
    V = assemble(space, s.metric, "connection-energy", s.quad)
    v = np.random.default_rng(2).normal(size=(space.n_dofs, 3))
    assert V.energy(v) == pytest.approx(sum(v[:, c] @ (K @ v[:, c]) for c in range(3)), rel=1e-12)


def test_connection_energy_conformal_is_positive(conf03):
    s = conf03
    space = FemSpace(s.mesh, 1)
    V = assemble(space, s.metric, "connection-h1", s.quad)
    v = np.random.default_rng(4).normal(size=(space.n_dofs, 3))
    assert V.energy(v) > 0
    assert abs(V.matrix - V.matrix.T).max() <= 1e-12


def test_quadrature_degree_checked(flat05):
    space = FemSpace(flat05.mesh, 2)
    with pytest.raises(QuadratureError):
        assemble(space, flat05.metric, "mass", degree=3)
    with pytest.raises(ValueError):
        assemble(space, flat05.metric, "nope", flat05.quad)


def test_pcg_rejects_bad_diagonal():
    import scipy.sparse as sp
    with pytest.raises(SolverError):
        pcg(sp.diags([1.0, -1.0]).tocsr(), np.ones(2))


def test_trace_mass_is_area(flat03):
    s = flat03
    trace = TraceSpace(FemSpace(s.mesh, 2), s.bg)
    assert trace.mass.sum() == pytest.approx(s.bg.area, rel=1e-12)
    one = np.ones(trace.n)
    assert np.abs(trace.stiffness @ one).max() <= 1e-12


def test_surface_poisson_spherical_harmonic(flat03):
    s = flat03
    form = assemble_surface(s.mesh.boundary, s.bg)
    x = s.bg.surface.vertices[:, 0]
    with pytest.raises(MeanValueError):
        solve_surface_poisson(form, x + 1.0)
    m = np.asarray(form.mass.sum(1)).ravel()
    f = -2.0 * (x - (m @ x) / m.sum())
    v = solve_surface_poisson(form, f)
    assert np.abs(v - x).max() <= s.mesh.h
