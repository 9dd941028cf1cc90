import numpy as np
import pytest

from harmcoords.fem import FemSpace, TraceSpace, assemble, boundary_flux, solve_dirichlet
from harmcoords.identities import (EXACT, ORDER_H, IdentityResidualReport, _ineq, check_energy_identity,
                                   mean_convexity, random_fields)

from conftest import pipeline_run


def rows(rep):
    return {r["name"]: r for r in rep["identities"]}


@pytest.fixture(scope="module")
def conf():
    return pipeline_run(gen_h=0.3, family="conformal", eps=0.02, ledger=False)


def test_energy_identity_with_source(conf03):
    s = conf03
    space = FemSpace(s.mesh, 2)
    form = assemble(space, s.metric, "dirichlet-energy", s.quad)
    trace = TraceSpace(space, s.bg)
    nodes = space.nodes()
    load = 1.0 + nodes[:, 0]
    u = solve_dirichlet(form, np.sin(nodes[space.boundary_dofs, 1]), load=load, tol=1e-12)
    rb, _ = boundary_flux(form, u, trace, load=load)
    rep = check_energy_identity(form, u, rb, load=load)
    assert rep.passed and rep.rel_residual <= 1e-8
    assert rep.terms["source"] != 0.0
    # a wrong flux is caught
    assert not check_energy_identity(form, u, 1.01 * rb, load=load).passed


def test_pipeline_energy_identities(conf):
    rep, _ = conf
    for name in ("energy identity X", "energy identity x1", "energy identity x2", "energy identity x3"):
        r = rows(rep)[name]
        assert r["klass"] == EXACT and r["rel_residual"] <= 1e-8


def test_bochner_converges_on_flat_ball():
    rel = [rows(pipeline_run(gen_h=h, ledger=False)[0])["Bochner formula x1"]["rel_residual"] for h in (0.5, 0.3)]
    assert rel[1] < rel[0] and rel[1] <= 0.1 * 0.3


def test_refined_bochner_bookkeeping(conf):
    rep, _ = conf
    r = rows(rep)["refined Bochner identity"]
    assert r["extra"]["theta_hat_cross_check"] <= 1e-10
    assert r["left"] == pytest.approx(r["terms"]["lhs_hessian"] + r["terms"]["lhs_flux"], rel=1e-14)
    e = sum(v for k, v in r["terms"].items() if k.startswith("E_"))
    assert r["right"] == pytest.approx(e, rel=1e-12)
    assert len([k for k in r["terms"] if k.startswith("E_")]) == 8


def test_conformal_identities(conf):
    rep, _ = conf
    r = rows(rep)
    assert r["sum of squares on boundary"]["passed"]
    assert r["pulled-back round metric"]["rel_residual"] <= 0.01
    flat = rows(pipeline_run(gen_h=0.3, ledger=False)[0])
    assert flat["pulled-back round metric"]["rel_residual"] <= 1e-12


def test_report_classes():
    a = IdentityResidualReport.compare("x", 1.0, 1.0 + 1e-10, EXACT)
    assert a.passed
    assert not IdentityResidualReport.compare("x", 1.0, 1.1, EXACT).passed
    assert IdentityResidualReport.compare("x", 1.0, 1.1, ORDER_H).passed
    assert not IdentityResidualReport.compare("x", 1.0, 1.1, ORDER_H, tol=0.05).passed
    assert not _ineq("hard", 2.0, 1.0, True).passed
    soft = _ineq("soft", 2.0, 1.0, False)
    assert soft.passed and soft.extra["ratio"] == 2.0
    assert not _ineq("nan", float("nan"), 1.0, False).passed


def test_mean_convexity_and_random_fields(flat03):
    mc = mean_convexity(flat03.bg)
    assert mc["holds"] and mc["boundary_components"] == 1
    space = FemSpace(flat03.mesh, 2)
    a, b = random_fields(space, 3, seed=7), random_fields(space, 3, seed=7)
    assert all(np.array_equal(x.coef, y.coef) for x, y in zip(a, b))


def test_ledger_rows(conf):
    rep = pipeline_run(gen_h=0.3, family="conformal", eps=0.02)[0]
    ineq = rep["inequalities"]
    hard = [r for r in ineq if r["extra"]["hard"]]
    assert len(hard) == 4 and all(r["passed"] for r in hard)
    assert all(np.isfinite(r["left"]) and np.isfinite(r["right"]) for r in ineq)
