import csv

import numpy as np
import pytest

from harmcoords.harmonic import (assemble_gram_deficit, certify_diffeomorphism, pushforward_metric,
                                 write_coordinates_csv)

import oracles as o
from conftest import pipeline_run


@pytest.fixture(scope="module")
def flat():
    return pipeline_run(gen_h=0.3, ledger=False)


@pytest.fixture(scope="module")
def conf():
    return pipeline_run(gen_h=0.3, family="conformal", eps=0.02, ledger=False)


def test_flat_coordinates_are_the_chart(flat):
    rep, st = flat
    nv = st.mesh.n_vertices
    assert np.abs(st.atlas.coords.coef[:nv] - st.mesh.vertices).max() <= 1e-8
    assert rep["gram_deficit"]["B_Linf"] <= 1e-7
    assert rep["pushforward"]["dev_Linf"] <= 1e-7
    assert rep["verdict"] == "certified"


def test_radius_field_on_flat_ball(flat):
    rep, st = flat
    h = st.mesh.h
    rf = rep["radius_field"]
    assert rf["max_abs_X"] <= 1 + 10 * h * h
    # X = x up to the vertex-normal error
    nv = st.mesh.n_vertices
    assert np.abs(st.radius.X.coef[:nv] - st.mesh.vertices).max() <= h * h
    assert rf["grad_X_minus_g_L2"] <= h


def test_radius2_gram_deficit_and_volume_defect():
    rep, st = pipeline_run(gen_h=0.6, radius=2.0, ledger=False)
    assert rep["gram_deficit"]["B_Linf"] == pytest.approx(o.GRAM_DEFICIT_RADIUS2, rel=1e-6)
    vd = rep["volume_defect"]
    assert vd["lhs"] == pytest.approx(o.VOLUME_DEFECT_RADIUS2, rel=0.06)
    assert vd["rhs"] == pytest.approx(o.VOLUME_DEFECT_RADIUS2, rel=0.06)
    assert vd["holds"]
    # |B| = 0.75 sqrt 3 > 1: the certificate must refuse
    assert rep["verdict"] == "failed" and "a_gram_deficit" in rep["certificate"]["failures"]


def test_gram_deficit_matches_pushforward_identity(conf):
    rep, st = conf
    pf = rep["pushforward"]
    # g_h - delta = -B pulled back through the Jacobian
    assert pf["identity_residual"] <= 1e-10
    assert pf["min_gram_eigenvalue"] > 0
    assert rep["gram_deficit"]["B_Linf"] <= 0.5 * st.mesh.h


def test_flip_breaks_orientation(conf):
    _, st = conf
    flipped = st.atlas.flip(1).evaluate(st.quad)
    gram = assemble_gram_deficit(flipped, st.quad)
    cert = certify_diffeomorphism(flipped, gram, st.quad)
    assert cert.verdict == "failed" and cert.failures == ["b_orientation"]
    # B is invariant under the flip
    assert np.allclose(gram.norm, st.gram.norm, atol=1e-14)
    again = pushforward_metric(flipped, gram, st.quad)
    assert again["dev_Linf"] == pytest.approx(pushforward_metric(st.atlas, st.gram, st.quad)["dev_Linf"], rel=1e-12)


def test_max_principle_report(conf):
    rep, st = conf
    c = rep["coordinates"]
    assert c["holds"] and c["max_abs_x"] <= 1 + 10 * st.mesh.h ** 2
    assert c["boundary_sum_x2_error"] <= 1e-12


def test_coordinates_csv(conf, tmp_path):
    _, st = conf
    p = tmp_path / "x.csv"
    write_coordinates_csv(st.atlas, p)
    rows = list(csv.reader(p.open()))
    assert rows[0] == ["vertex", "chart_x", "chart_y", "chart_z", "x1", "x2", "x3"]
    assert len(rows) == st.mesh.n_vertices + 1
    assert float(rows[5][4]) == st.atlas.coords.coef[4, 0]
