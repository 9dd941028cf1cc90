import math

import numpy as np
import pytest

import oracles as o


def test_h_half_constant_two_routes():
    assert o.derive_h_half_const(True) == pytest.approx(o.H_HALF_CONST_UNIT_SPHERE, rel=1e-14)
    assert o.derive_h_half_const(False) == pytest.approx(o.H_HALF_CONST_UNIT_SPHERE, rel=1e-9)


def test_radius2_closed_forms():
    lhs, rhs = o.derive_volume_defect_radius2()
    assert lhs == pytest.approx(o.VOLUME_DEFECT_RADIUS2, rel=1e-14)
    assert rhs == pytest.approx(o.VOLUME_DEFECT_RADIUS2, rel=1e-14)
    assert o.derive_gram_deficit_radius2() == pytest.approx(o.GRAM_DEFICIT_RADIUS2, rel=1e-14)


def test_simplex_integrals_match_duffy_rule():
    pts, wts = o.duffy_tet_rule(5)
    rng = np.random.default_rng(3)
    for k in (1, 2, 3, 4):
        c = rng.normal(size=4)
        ref = float((wts * (pts @ c) ** k).sum())
        assert o.simplex_power_integral(c, k, 1.0 / 6.0) == pytest.approx(ref, rel=1e-12, abs=1e-14)
    assert wts.sum() == pytest.approx(1.0 / 6.0, rel=1e-14)
    assert math.isclose(o.SPHERE_LAMBDA1, 2.0)
