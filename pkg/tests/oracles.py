"""Independent reference values, derived without the package and frozen.

Each frozen constant has a derivation function; ``test_oracles.py`` checks
that re-deriving gives the frozen number.
"""
from __future__ import annotations

import math

import numpy as np
from scipy.integrate import solve_ivp

# trace norm of the constant 1 on the unit sphere: the minimizing extension
# solves u'' + 2u'/r = u, u(1) = 1, so u = sinh r / (r sinh 1) and the
# H1 energy 4 pi int (u'^2 + u^2) r^2 dr = 4 pi u'(1) = 4 pi (coth 1 - 1)
H_HALF_CONST_UNIT_SPHERE = 1.983360131936793

# radius-2 flat ball: |dS| - 3|S| = 16 pi - 32 pi, and X = x/2 gives
# sqrt(3 |S|) ||grad X - g||_L2 = sqrt(32 pi) sqrt(3/4 * 32 pi / 3) = 16 pi
VOLUME_DEFECT_RADIUS2 = 16.0 * math.pi

# Gram deficit on the radius-2 ball with x^i = chart / 2: B = g/4 - g, |B|_g = (3/4) sqrt 3
GRAM_DEFICIT_RADIUS2 = 0.75 * math.sqrt(3.0)

# first nonzero eigenvalue of the round unit sphere, l (l + 1) with l = 1
SPHERE_LAMBDA1 = 2.0


def derive_h_half_const(closed_form=True):
    if closed_form:
        return math.sqrt(4.0 * math.pi * (1.0 / math.tanh(1.0) - 1.0))
    # shoot the radial ODE from a small radius with the regular series start
    r0 = 1e-6

    def rhs(r, y):
        return [y[1], y[0] - 2.0 * y[1] / r]

    sol = solve_ivp(rhs, (r0, 1.0), [1.0, r0 / 3.0], rtol=1e-12, atol=1e-14)
    u1, du1 = sol.y[0, -1], sol.y[1, -1]
    return math.sqrt(4.0 * math.pi * du1 / u1)


def derive_volume_defect_radius2():
    area, vol = 4.0 * math.pi * 4.0, 4.0 / 3.0 * math.pi * 8.0
    lhs = abs(area - 3.0 * vol)
    grad_dev_l2 = math.sqrt(3.0 * 0.25 * vol)  # |grad X - g|^2 = |g/2|^2 = 3/4 pointwise
    rhs = math.sqrt(3.0 * vol) * grad_dev_l2
    return lhs, rhs


def derive_gram_deficit_radius2():
    B = 0.25 * np.eye(3) - np.eye(3)
    return float(np.sqrt((B * B).sum()))


def simplex_power_integral(c, k, volume):
    """int_T (sum_a c_a lambda_a)^k dV over a tet via int lambda^alpha = alpha! 3! V / (|alpha| + 3)!.

    The multinomial sum collapses to k! 3! V / (k + 3)! times the complete
    homogeneous symmetric polynomial h_k(c).
    """
    c = np.asarray(c, float)
    hk = 0.0
    for a in range(k + 1):
        for b in range(k + 1 - a):
            for d in range(k + 1 - a - b):
                e = k - a - b - d
                hk += c[0] ** a * c[1] ** b * c[2] ** d * c[3] ** e
    return math.factorial(k) * 6.0 * volume / math.factorial(k + 3) * hk


def duffy_tet_rule(n):
    """Collapsed-coordinate Gauss-Legendre rule on the unit tet: points (m, 4) barycentric, weights sum 1/6."""
    x, w = np.polynomial.legendre.leggauss(n)
    x, w = 0.5 * (x + 1.0), 0.5 * w
    pts, wts = [], []
    for i in range(n):
        for j in range(n):
            for k in range(n):
                u, v, s = x[i], x[j], x[k]
                a = u
                b = (1.0 - u) * v
                c = (1.0 - u) * (1.0 - v) * s
                pts.append([1.0 - a - b - c, a, b, c])
                wts.append(w[i] * w[j] * w[k] * (1.0 - u) ** 2 * (1.0 - v))
    return np.array(pts), np.array(wts)
