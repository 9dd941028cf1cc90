"""Harmonic radius field, harmonic coordinates, Gram deficit and the diffeomorphism certificate."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .fem import (AssembledForm, DiscreteField, FemSpace, TraceSpace, VolumeQuadrature, assemble,
                  boundary_flux, solve_dirichlet)
from .metric import BoundaryGeometry
from .norms import pointwise_norm2
from .uniformize import ConformalMap


# ---------------------------------------------------------------- radius field

@dataclass(eq=False)
class RadiusField:
    X: DiscreteField
    form: AssembledForm
    flux: np.ndarray          # r_B, (nB, 3)
    report: dict


def covariant_gradient_vector(X: DiscreteField, quad: VolumeQuadrature, sl=slice(None)):
    """(nabla X)_{im} = g_mn (d_i X^n + Gamma^n_il X^l), (nt, Q, 3, 3)."""
    dX = X.grads(quad, sl)  # (t, q, n, i)
    Xv = X.values(quad, sl)
    up = np.swapaxes(dX, -1, -2) + np.einsum("tqnil,tql->tqin", quad.gamma[sl], Xv)
    return np.einsum("tqin,tqnm->tqim", up, quad.g[sl])


def second_covariant_vector(X: DiscreteField, quad: VolumeQuadrature, sl):
    """(nabla^2 X)_{jim} with the last index lowered, (t, Q, 3, 3, 3)."""
    gam = quad.gamma[sl]
    dgam = quad.dgamma(sl)                       # (t, q, j, m, i, l) = d_j Gamma^m_il
    Xv = X.values(quad, sl)                      # (t, q, l)
    dX = np.swapaxes(X.grads(quad, sl), -1, -2)  # (t, q, j, l) = d_j X^l
    d2X = X.second_partials(quad, sl)            # (t, l, j, i)
    cov1 = dX + np.einsum("tqmil,tql->tqim", gam, Xv)  # nabla_i X^m
    d_cov1 = (np.einsum("tmji->tjim", d2X)[:, None]
              + np.einsum("tqjmil,tql->tqjim", dgam, Xv)
              + np.einsum("tqmil,tqjl->tqjim", gam, dX))
    second = (d_cov1 + np.einsum("tqmjl,tqil->tqjim", gam, cov1)
              - np.einsum("tqlji,tqlm->tqjim", gam, cov1))
    return np.einsum("tqjin,tqnm->tqjim", second, quad.g[sl])


def normal_boundary_data(trace: TraceSpace, bg: BoundaryGeometry):
    """Vertex-normal field on boundary dofs, edge dofs by averaging."""
    return trace.from_surface_vertices(bg.vertex_normals)


def solve_radius_field(space: FemSpace, quad: VolumeQuadrature, bg: BoundaryGeometry, trace: TraceSpace,
                       tol=1e-10, form: AssembledForm | None = None) -> RadiusField:
    """Vector Dirichlet problem for the connection energy with X = N on the boundary."""
    if form is None:
        form = assemble(space, quad.metric, "connection-energy", quad=quad)
    data = normal_boundary_data(trace, bg)
    X = solve_dirichlet(form, data, tol=tol)
    rb, _ = boundary_flux(form, X, trace)
    h = space.mesh.h
    # pointwise |X|_g at quadrature points and at vertices
    Xq = X.values(quad)
    x2 = pointwise_norm2(Xq, quad.g, quad.ginv, "vector")
    gv, _, _ = quad.metric.evaluate(space.mesh.vertices, order=0, check=False)
    Xv = X.coef[: space.mesh.n_vertices]
    xv2 = np.einsum("vi,vij,vj->v", Xv, gv, Xv)
    maxX = float(np.sqrt(max(x2.max(), xv2.max())))
    dev2 = np.empty_like(quad.w)
    gr2 = np.empty_like(quad.w)
    h2 = np.empty_like(quad.w)
    for sl in quad.chunks():
        DX = covariant_gradient_vector(X, quad, sl)
        dev2[sl] = pointwise_norm2(DX - quad.g[sl], quad.g[sl], quad.ginv[sl], "tensor2")
        gr2[sl] = pointwise_norm2(DX, quad.g[sl], quad.ginv[sl], "tensor2")
        h2[sl] = pointwise_norm2(second_covariant_vector(X, quad, sl), quad.g[sl], quad.ginv[sl], "tensor3")
    report = {
        "max_abs_X": maxX,
        "max_abs_X_bound": 1.0 + 10.0 * h * h,
        "grad_X_L2": float(np.sqrt(quad.integrate(gr2))),
        "grad_X_minus_g_L2": float(np.sqrt(quad.integrate(dev2))),
        "grad_X_minus_g_L6": float(quad.integrate(dev2**3) ** (1.0 / 6.0)),
        "hess_X_L2": float(np.sqrt(quad.integrate(h2))),
        "solver_residual": X.info["residual"],
        "solver_iterations": X.info["iterations"],
    }
    report["max_principle_ok"] = bool(maxX <= report["max_abs_X_bound"])
    return RadiusField(X, form, rb, report)


def volume_defect(quad: VolumeQuadrature, bg: BoundaryGeometry, radius: RadiusField, Lambda=0.0):
    """| |dSigma| - 3|Sigma| | against sqrt(3|Sigma|) ||nabla X - g||_L2, with 10h^2(1+Lambda) slack."""
    vol = quad.volume
    area = bg.area
    lhs = abs(area - 3.0 * vol)
    rhs = np.sqrt(3.0 * vol) * radius.report["grad_X_minus_g_L2"]
    h = quad.mesh.h
    slack = 10.0 * h * h * (1.0 + Lambda)
    return {"area": area, "volume": vol, "lhs": float(lhs), "rhs": float(rhs), "slack": float(slack),
            "holds": bool(lhs <= rhs + slack)}


# ---------------------------------------------------------------- coordinates

@dataclass(eq=False)
class HarmonicAtlas:
    """Harmonic coordinates x^1..x^3 with their fluxes and derivatives at quadrature points."""

    space: FemSpace
    coords: DiscreteField      # coef (n, 3)
    boundary_values: np.ndarray  # (nB, 3)
    flux_residual: np.ndarray    # r_B, (nB, 3)
    flux: np.ndarray             # N(x^i) on boundary dofs, (nB, 3)
    form: AssembledForm
    grads: np.ndarray = None     # (nt, Q, a, i) = d_i x^a
    hess: np.ndarray = None      # (nt, Q, a, i, j) covariant
    info: dict = field(default_factory=dict)

    def evaluate(self, quad: VolumeQuadrature):
        self.grads = self.coords.grads(quad)
        self.hess = self.coords.covariant_hessian(quad)
        return self

    def component(self, a) -> DiscreteField:
        return DiscreteField(self.space, self.coords.coef[:, a])

    def flip(self, a):
        """Replace x^a by -x^a (an orientation-reversing but harmonic change)."""
        s = np.ones(3)
        s[a] = -1.0
        c = DiscreteField(self.space, self.coords.coef * s, "vector", dict(self.coords.info))
        out = HarmonicAtlas(self.space, c, self.boundary_values * s, self.flux_residual * s, self.flux * s,
                            self.form, info=dict(self.info, flipped=int(a)))
        return out


def solve_coordinates(space: FemSpace, quad: VolumeQuadrature, trace: TraceSpace, cm: ConformalMap,
                      tol=1e-10, form: AssembledForm | None = None) -> HarmonicAtlas:
    """Three scalar Dirichlet solves sharing one form, with data x^i_S o Phi."""
    if form is None:
        form = assemble(space, quad.metric, "dirichlet-energy", quad=quad)
    data = trace.from_surface_vertices(cm.images)  # (nB, 3)
    cols, rbs, Ns, res, its = [], [], [], [], []
    for a in range(3):
        u = solve_dirichlet(form, data[:, a], tol=tol)
        rb, N = boundary_flux(form, u, trace)
        cols.append(u.coef)
        rbs.append(rb)
        Ns.append(N)
        res.append(u.info["residual"])
        its.append(u.info["iterations"])
    coords = DiscreteField(space, np.column_stack(cols), "vector", {"residual": max(res), "iterations": its})
    atlas = HarmonicAtlas(space, coords, data, np.column_stack(rbs), np.column_stack(Ns), form,
                          info={"solver_residuals": res, "solver_iterations": its})
    return atlas


def max_principle(atlas: HarmonicAtlas, quad: VolumeQuadrature):
    h = atlas.space.mesh.h
    vq = atlas.coords.values(quad)
    m_abs = float(max(np.abs(atlas.coords.coef).max(), np.abs(vq).max()))
    m_sum = float(max((atlas.coords.coef**2).sum(1).max(), (vq**2).sum(-1).max()))
    bound = 1.0 + 10.0 * h * h
    bnd = (atlas.boundary_values**2).sum(1)
    return {"max_abs_x": m_abs, "max_sum_x2": m_sum, "bound": bound, "holds": bool(m_abs <= bound),
            "boundary_sum_x2_error": float(np.abs(bnd[: _n_boundary_vertices(atlas)] - 1.0).max())}


def _n_boundary_vertices(atlas):
    return int((atlas.space.boundary_dofs < atlas.space.mesh.n_vertices).sum())


# ---------------------------------------------------------------- Gram deficit

@dataclass(eq=False)
class GramDeficit:
    B: np.ndarray        # (nt, Q, 3, 3) chart components
    norm: np.ndarray     # (nt, Q) g-orthonormal Frobenius norm
    grad_norm2: np.ndarray  # (nt, Q) |nabla B|^2
    report: dict


def assemble_gram_deficit(atlas: HarmonicAtlas, quad: VolumeQuadrature) -> GramDeficit:
    """B = sum_a dx^a (x) dx^a - g and its covariant derivative from the Hessians."""
    J = atlas.grads
    B = np.einsum("tqai,tqaj->tqij", J, J) - quad.g
    nB2 = pointwise_norm2(B, quad.g, quad.ginv, "tensor2")
    dB2 = np.empty_like(nB2)
    for sl in quad.chunks():
        dB = np.einsum("tqaki,tqaj->tqkij", atlas.hess[sl], J[sl])
        dB = dB + np.swapaxes(dB, -1, -2)
        dB2[sl] = pointwise_norm2(dB, quad.g[sl], quad.ginv[sl], "tensor3")
    l2 = quad.integrate(nB2)
    rep = {
        "B_Linf": float(np.sqrt(nB2.max())),
        "B_L2": float(np.sqrt(l2)),
        "grad_B_L2": float(np.sqrt(quad.integrate(dB2))),
        "B_H1": float(np.sqrt(l2 + quad.integrate(dB2))),
        "second_derivative_excluded": True,
    }
    return GramDeficit(B, np.sqrt(nB2), dB2, rep)


# ---------------------------------------------------------------- certificate

@dataclass
class DiffeoCertificate:
    max_B: float
    min_det: float
    max_sum_x2: float
    containment_bound: float
    injectivity_pairs: int
    min_gram_eigenvalue: float
    checks: dict
    verdict: str
    failures: list

    def to_dict(self):
        return dict(self.__dict__)


def _grads_at(field_: DiscreteField, quad: VolumeQuadrature, lam):
    _, dphi = field_.space.basis(lam)
    dl = np.einsum("pak,tab->tpbk", dphi, field_._local())
    return np.einsum("tpbk,tki->tpbi", dl, quad.grad_lambda)


def certify_diffeomorphism(atlas: HarmonicAtlas, gram: GramDeficit, quad: VolumeQuadrature,
                           collision_radius=1e-9) -> DiffeoCertificate:
    """Checks (a) |B| < 1, (b) det > 0, (c) image containment, (d) barycentre collisions."""
    mesh = atlas.space.mesh
    h = mesh.h
    max_B = float(gram.norm.max())
    det_q = np.linalg.det(atlas.grads)
    det_v = np.linalg.det(_grads_at(atlas.coords, quad, np.eye(4)))
    min_det = float(min(det_q.min(), det_v.min()))
    mp = max_principle(atlas, quad)
    lam_c = np.full((1, 4), 0.25)
    phi_c, _ = atlas.space.basis(lam_c)
    centres = np.einsum("qa,tab->tqb", phi_c, atlas.coords._local())[:, 0]
    pairs = cKDTree(centres).query_pairs(collision_radius, output_type="ndarray")
    bad = 0
    if len(pairs):
        ta, tb = mesh.tets[pairs[:, 0]], mesh.tets[pairs[:, 1]]
        shared = (ta[:, :, None] == tb[:, None, :]).any(axis=(1, 2))
        bad = int((~shared).sum())
    min_eig = np.inf
    for sl in quad.chunks():
        G = np.einsum("tqai,tqij,tqbj->tqab", atlas.grads[sl], quad.ginv[sl], atlas.grads[sl])
        min_eig = min(min_eig, float(np.linalg.eigvalsh(G).min()))
    checks = {
        "a_gram_deficit": bool(max_B < 1.0),
        "b_orientation": bool(min_det > 0.0),
        "c_containment": bool(mp["max_sum_x2"] <= 1.0 + 10.0 * h * h),
        "d_injectivity": bool(bad == 0),
    }
    failures = [k for k, v in checks.items() if not v]
    if failures == [] and not min_eig > 0:
        failures.append("gram_spd")
    return DiffeoCertificate(max_B, min_det, mp["max_sum_x2"], 1.0 + 10.0 * h * h, bad, min_eig, checks,
                             "certified" if not failures else "failed", failures)


# ---------------------------------------------------------------- pushforward metric

def _pushforward_chunk(J, H, B, ginv):
    """Pointwise |g_h - delta|^2, |d g_h|^2, |dd g_h|^2 surrogate and identity residuals."""
    t, Q = J.shape[:2]
    JT = np.swapaxes(J, -1, -2)
    G = J @ ginv @ JT
    gh = np.linalg.inv(G)
    dev = gh - np.eye(3)
    dev2 = (dev * dev).sum((-1, -2))
    # d_k G^ab = g^ij (H^a_ki J^b_j + J^a_i H^b_kj); d_k g_h = -g_h dG g_h
    Hk = np.swapaxes(H, 2, 3)                                   # (t, Q, k, a, i)
    dG = Hk @ (ginv @ JT)[:, :, None]
    dG = dG + np.swapaxes(dG, -1, -2)
    ghk = gh[:, :, None]
    dgh = -(ghk @ dG @ ghk)
    M = dgh.reshape(t, Q, 3, 9)
    ddev2 = ((ginv @ M) * M).sum((-1, -2))
    # HH_kl^ab = g^ij H^a_ki H^b_lj, symmetrized in (a, b)
    Hf = H.reshape(t, Q, 9, 3)                                  # rows (a, k)
    HH = (Hf @ ginv @ np.swapaxes(Hf, -1, -2)).reshape(t, Q, 3, 3, 3, 3)  # (a, k, b, l)
    HH = HH + HH.transpose(0, 1, 4, 3, 2, 5)
    HH = HH.transpose(0, 1, 2, 4, 3, 5)                         # (a, b, k, l)
    gi = ginv[:, :, None, None]
    hh2 = ((gi @ HH @ gi) * HH).sum((2, 3, 4, 5))
    # algebraic identity g_h - delta = -B in harmonic coordinates
    Jinv = np.linalg.inv(J)
    Bh = np.swapaxes(Jinv, -1, -2) @ B @ Jinv
    return dev2, ddev2, hh2, float(np.abs(dev + Bh).max()), float(np.abs(dev + B).max()), \
        float(np.linalg.eigvalsh(G).min())


def pushforward_metric(atlas: HarmonicAtlas, gram: GramDeficit, quad: VolumeQuadrature):
    """Coordinate metric g_ab = (g(dx^a, dx^b))^{-1} and its deviation from the identity."""
    J, H = atlas.grads, atlas.hess
    dev2, ddev2, hh2 = (np.empty(quad.w.shape) for _ in range(3))
    ident = raw = 0.0
    lam = np.inf
    for sl in quad.chunks():
        G = np.einsum("tqai,tqij,tqbj->tqab", J[sl], quad.ginv[sl], J[sl])
        if not np.linalg.eigvalsh(G).min() > 0:
            raise ValueError("inverse Gram matrix is singular")
        d0, d1, d2, i0, r0, l0 = _pushforward_chunk(J[sl], H[sl], gram.B[sl], quad.ginv[sl])
        dev2[sl], ddev2[sl], hh2[sl] = d0, d1, d2
        ident, raw, lam = max(ident, i0), max(raw, r0), min(lam, l0)
    l2 = quad.integrate(dev2)
    h1 = l2 + quad.integrate(ddev2)
    return {
        "dev_Linf": float(np.sqrt(dev2.max())),
        "dev_L2": float(np.sqrt(l2)),
        "dev_H1": float(np.sqrt(h1)),
        "dev_H2_surrogate": float(np.sqrt(h1 + quad.integrate(hh2))),
        "H2_excludes_third_derivatives": True,
        "identity_residual": float(ident),
        "chart_component_residual": float(raw),
        "min_gram_eigenvalue": float(lam),
    }


def write_coordinates_csv(atlas: HarmonicAtlas, path):
    mesh = atlas.space.mesh
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["vertex", "chart_x", "chart_y", "chart_z", "x1", "x2", "x3"])
        for i, (p, x) in enumerate(zip(mesh.vertices, atlas.coords.coef[: mesh.n_vertices])):
            w.writerow([i, *(f"{v:.17g}" for v in p), *(f"{v:.17g}" for v in x)])
