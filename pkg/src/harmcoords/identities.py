"""Residual checks for the integral identities and measured ratios for the inequalities."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .fem import DiscreteField, TraceSpace, VolumeQuadrature, surface_p1_frame_grads
from .harmonic import GramDeficit, HarmonicAtlas, RadiusField, covariant_gradient_vector
from .metric import BoundaryGeometry, christoffel_from
from .norms import (TraceNormContext, h_half_norm, h_k_norm, h_minus_half_norm, lp_norm, pointwise_norm2,
                    vertex_average)
from .uniformize import ConformalMap

EXACT = "exact-to-solver-tol"
ORDER_H = "O(h)"
ORDER_H2 = "O(h^2)"
INEQUALITY = "inequality"
EXACT_TOL = 1e-8


@dataclass
class IdentityResidualReport:
    name: str
    left: float
    right: float
    abs_residual: float
    rel_residual: float
    klass: str
    passed: bool
    terms: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    @classmethod
    def compare(cls, name, left, right, klass, terms=None, extra=None, tol=None):
        left, right = float(left), float(right)
        ab = abs(left - right)
        rel = ab / max(abs(left), abs(right), 1e-14)
        ok = bool(np.isfinite(rel))
        if klass == EXACT:
            ok = ok and rel <= (EXACT_TOL if tol is None else tol)
        elif tol is not None:
            ok = ok and rel <= tol
        return cls(name, left, right, ab, rel, klass, ok, dict(terms or {}), dict(extra or {}))

    def to_dict(self):
        return asdict(self)


def _quad_grad2(u: DiscreteField, quad: VolumeQuadrature):
    """int |grad u|^2 for scalars, int |nabla X|^2 (covariant) for vector fields."""
    if u.ncomp == 1:
        return quad.integrate(pointwise_norm2(u.grads(quad), quad.g, quad.ginv, "covector"))
    tot = 0.0
    for sl in quad.chunks():
        D = covariant_gradient_vector(u, quad, sl)
        tot += float((quad.w[sl] * pointwise_norm2(D, quad.g[sl], quad.ginv[sl], "tensor2")).sum())
    return tot


# ---------------------------------------------------------------- energy and Bochner

def check_energy_identity(form, u: DiscreteField, flux_residual, load=None, name="energy identity"):
    """int |grad u|^2 = int s u + int_dSigma u N(u) for -Delta u = s.

    The boundary pairing is u_B . r_B with the variational flux r_B = (A u - M s)_B,
    and every integral uses the quadrature of ``form``.
    """
    lhs = _quad_grad2(u, form.quad)
    bnd = float(np.sum(u.coef[u.space.boundary_dofs] * np.asarray(flux_residual)))
    src = 0.0 if load is None else float(u.coef @ (_mass(form) @ np.asarray(load)))
    return IdentityResidualReport.compare(name, lhs, src + bnd, EXACT,
                                          {"dirichlet": lhs, "source": src, "boundary": bnd})


def _mass(form):
    from .fem import _mass_for
    return _mass_for(form)


def check_bochner_identity(u: DiscreteField, quad: VolumeQuadrature, bg: BoundaryGeometry, trace: TraceSpace,
                           flux, name="Bochner formula"):
    """int|Hess u|^2 + int Ric(du,du) + int_d[theta(du,du) + tr theta N(u)^2] = 2 int_d du.dN(u).

    The right side is the consistent pairing 2 u_B . S_d N_B with the trace stiffness.
    """
    H = u.covariant_hessian(quad)
    du = u.grads(quad)
    ric = quad.curvature()["ricci"]
    hess = quad.integrate(pointwise_norm2(H, quad.g, quad.ginv, "tensor2"))
    ricci = quad.integrate(np.einsum("tqi,tqij,tqjk,tqkl,tql->tq", du, quad.ginv, ric, quad.ginv, du, optimize=True))
    ub = u.coef[u.space.boundary_dofs]
    d = trace.frame_grads(ub)
    th = bg.integrate(np.einsum("fqa,fqac,fqcd,fqdb,fqb->fq", d, bg.gb_inv, bg.theta, bg.gb_inv, d, optimize=True))
    Nq = trace.values(flux)
    trN = bg.integrate(bg.tr_theta * Nq * Nq)
    rhs = 2.0 * float(ub @ (trace.stiffness @ flux))
    terms = {"hessian": hess, "ricci": ricci, "theta": th, "mean_curvature_flux": trN}
    return IdentityResidualReport.compare(name, hess + ricci + th + trN, rhs, ORDER_H, terms)


def traceless_ricci_dot(quad: VolumeQuadrature, B):
    c = quad.curvature()
    T = c["ricci"] - c["scalar"][..., None, None] / 3.0 * quad.g
    return np.einsum("tqac,tqbd,tqab,tqcd->tq", quad.ginv, quad.ginv, T, B, optimize=True)


def refined_bochner_terms(atlas: HarmonicAtlas, cm: ConformalMap, quad: VolumeQuadrature, bg: BoundaryGeometry,
                          trace: TraceSpace, gram: GramDeficit):
    """Left side and the eight terms of the error functional E, as a dict."""
    hess = quad.integrate(pointwise_norm2(atlas.hess, quad.g[:, :, None], quad.ginv[:, :, None], "tensor2").sum(-1))
    x = trace.values(atlas.boundary_values)  # (F, Q, 3)
    N = trace.values(atlas.flux)
    dN = N - x
    flux_term = 2.0 * bg.integrate((dN * dN).sum(-1))
    t2 = bg.tr_theta - 2.0
    p2 = bg.interpolate(cm.phi) ** -2 - 1.0
    curv = quad.curvature()
    G = curv["einstein"]
    xv = atlas.coords.values(quad)  # (nt, Q, 3)
    GH = np.einsum("tqac,tqbd,tqab,tqicd->tqi", quad.ginv, quad.ginv, G, atlas.hess, optimize=True)
    e = {
        "trace_theta_sq": 0.5 * bg.integrate(t2 * t2),
        "theta_hat_sq": -bg.integrate(bg.theta_hat_norm2),
        "phi_trace_theta": -bg.integrate(p2 * t2),
        "phi_flux": 4.0 * bg.integrate(p2 * (x * dN).sum(-1)),
        "trace_theta_flux": -bg.integrate(t2 * (dN * (N + x)).sum(-1)),
        "einstein_boundary": 2.0 * bg.integrate(bg.G_NN * (x * dN).sum(-1)),
        "einstein_interior": -2.0 * quad.integrate((xv * GH).sum(-1)),
        "traceless_ricci_gram": -3.0 * quad.integrate(traceless_ricci_dot(quad, gram.B)),
    }
    return {"hessian": hess, "flux": flux_term}, e


def check_refined_bochner(atlas: HarmonicAtlas, cm: ConformalMap, quad: VolumeQuadrature, bg: BoundaryGeometry,
                          trace: TraceSpace, gram: GramDeficit, name="refined Bochner identity"):
    """sum ||Hess x^i||^2 + 2 sum int_d (N(x^i) - x^i)^2 = E, with the per-term breakdown."""
    lhs, e = refined_bochner_terms(atlas, cm, quad, bg, trace, gram)
    L = lhs["hessian"] + lhs["flux"]
    E = float(sum(e.values()))
    check = -lp_norm(bg.theta_hat, 2, bg, kind="surface2").value ** 2
    terms = {"lhs_" + k: v for k, v in lhs.items()}
    terms.update({"E_" + k: v for k, v in e.items()})
    extra = {"theta_hat_cross_check": abs(check - e["theta_hat_sq"]), "theta_hat_norms_module": check}
    return IdentityResidualReport.compare(name, L, E, ORDER_H, terms, extra)


# ---------------------------------------------------------------- conformal identities

def _sym_traceless(a, b, gb, gb_inv):
    """Symmetrised traceless product of frame covectors a, b (..., 2)."""
    s = 0.5 * (a[..., :, None] * b[..., None, :] + b[..., :, None] * a[..., None, :])
    ip = np.einsum("...a,...ab,...b->...", a, gb_inv, b)
    return s - 0.5 * ip[..., None, None] * gb


def surface_hessian(bg: BoundaryGeometry, trace: TraceSpace, values, metric):
    """Frame Hessians of boundary scalar fields (nB, nc) from recovered vertex gradients, (F, Q, nc, 2, 2).

    The surface gradient is formed as an ambient chart vector, averaged to
    vertices, interpolated linearly and differentiated with the ambient
    connection; the result is projected on the triangle frame and symmetrised.
    """
    d = trace.frame_grads(values)  # (F, Q, nc, 2)
    up = np.einsum("fqab,fqcb->fqca", bg.gb_inv, d)
    W = np.einsum("fqca,fai->fqci", up, bg.tangents)
    Wv = vertex_average(bg, W)  # (V, nc, 3)
    tri = bg.surface.triangles
    Wt = np.einsum("qa,fa...->fq...", bg.bary, Wv[tri])
    dW = np.stack([Wv[tri[:, 1]] - Wv[tri[:, 0]], Wv[tri[:, 2]] - Wv[tri[:, 0]]], axis=1)  # (F, 2, nc, 3)
    g, dg, _ = metric.evaluate(bg.points, order=1, check=False)
    gam = christoffel_from(g, dg, np.linalg.inv(g))
    cov = dW[:, None] + np.einsum("fqkij,fai,fqcj->fqack", gam, bg.tangents, Wt)
    H = np.einsum("fqack,fqkl,fbl->fqcab", cov, g, bg.tangents)
    return 0.5 * (H + np.swapaxes(H, -1, -2))


def _frame_norm2(bg: BoundaryGeometry, T):
    """Pointwise squared norm of frame 2-tensors (F, Q, nc, 2, 2), summed over components."""
    return np.einsum("fqac,fqbd,fqiab,fqicd->fq", bg.gb_inv, bg.gb_inv, T, T, optimize=True)


def check_conformal_identities(atlas: HarmonicAtlas, cm: ConformalMap, bg: BoundaryGeometry, trace: TraceSpace,
                               metric):
    """(a) sum (x^i)^2 = 1 at boundary vertices, (b) the pulled-back round metric, (c) the conformal Hessian."""
    nv = atlas.space.mesh.n_vertices
    vert = atlas.space.boundary_dofs < nv
    xb = atlas.boundary_values
    sx = (xb[vert] ** 2).sum(1)
    err = float(np.abs(sx - 1.0).max())
    a = IdentityResidualReport("sum of squares on boundary", float(sx.max()), 1.0, err, err, EXACT, err <= 1e-12)
    d = trace.frame_grads(xb)  # (F, Q, 3, 2)
    phi2 = bg.interpolate(cm.phi) ** -2
    S = np.einsum("fqia,fqib->fqab", d, d)
    R = phi2[..., None, None] * bg.gb
    nS = np.sqrt(bg.integrate(bg.norm2(S)))
    nR = np.sqrt(bg.integrate(bg.norm2(R)))
    rb = np.sqrt(bg.integrate(bg.norm2(S - R)))
    b = IdentityResidualReport.compare("pulled-back round metric", nS, nR, ORDER_H, extra={"L2_residual": rb})
    b.abs_residual, b.rel_residual = float(rb), float(rb / max(nS, nR, 1e-14))
    H = surface_hessian(bg, trace, xb, metric)  # (F, Q, 3, 2, 2)
    xq = trace.values(xb)
    dl = surface_p1_frame_grads(bg, cm.log_phi)  # (F, 2)
    dl = np.broadcast_to(dl[:, None, None, :], d.shape)
    gbx = bg.gb[:, :, None]
    gix = bg.gb_inv[:, :, None]
    rest = xq[..., None, None] * phi2[..., None, None, None] * gbx + 2.0 * _sym_traceless(dl, d, gbx, gix)
    res = H + rest
    nH = np.sqrt(bg.integrate(_frame_norm2(bg, H)))
    nrest = np.sqrt(bg.integrate(_frame_norm2(bg, rest)))
    rc = np.sqrt(bg.integrate(_frame_norm2(bg, res)))
    c = IdentityResidualReport.compare("conformal Hessian", nH, nrest, ORDER_H, extra={"L2_residual": rc})
    c.abs_residual, c.rel_residual = float(rc), float(rc / max(nH, nrest, 1e-14))
    return a, b, c


# ---------------------------------------------------------------- mean convexity

def mean_convexity(bg: BoundaryGeometry):
    m = float(bg.tr_theta.min())
    comps = bg.surface.n_components
    return {"min_trace_theta": m, "boundary_components": comps, "holds": bool(m > 0 and comps == 1)}


# ---------------------------------------------------------------- inequality ledger

def _ineq(name, lhs, rhs, hard, extra=None):
    lhs, rhs = float(lhs), float(rhs)
    ratio = lhs / rhs if rhs > 0 else (0.0 if lhs == 0 else float("inf"))
    ok = bool(np.isfinite(lhs) and np.isfinite(rhs))
    if hard:
        ok = ok and lhs <= rhs
    ext = {"ratio": ratio if np.isfinite(ratio) else None, "hard": hard}
    ext.update(extra or {})
    return IdentityResidualReport(name, lhs, rhs, max(lhs - rhs, 0.0), ratio if np.isfinite(ratio) else 0.0,
                                  INEQUALITY, ok, {}, ext)


def random_fields(space, n=10, seed=42, degree=3):
    """Smooth random scalar fields: random polynomials of the chart coordinates up to ``degree``."""
    rng = np.random.default_rng(seed)
    p = space.nodes()
    powers = [(i, j, k) for i in range(degree + 1) for j in range(degree + 1 - i) for k in range(degree + 1 - i - j)]
    mono = np.column_stack([p[:, 0] ** i * p[:, 1] ** j * p[:, 2] ** k for i, j, k in powers])
    return [DiscreteField(space, mono @ rng.standard_normal(len(powers))) for _ in range(n)]


def sobolev_l6_ratios(ctx: TraceNormContext, fields):
    """||F||_L6 / (||grad F||_L2 + ||F||_H1/2) per field."""
    quad = ctx.quad
    out = []
    for f in fields:
        v = f.values(quad)
        l6 = quad.integrate(v**6) ** (1.0 / 6.0)
        gr = np.sqrt(_quad_grad2(f, quad))
        hh = h_half_norm(ctx, f.coef[f.space.boundary_dofs]).value
        out.append((l6, gr + hh))
    return out


def linf_h2_ratios(quad: VolumeQuadrature, fields):
    out = []
    for f in fields:
        sup = max(np.abs(f.values(quad)).max(), np.abs(f.coef).max())
        out.append((sup, h_k_norm(f, quad, 2).value))
    return out


def boundary_probe(trace: TraceSpace, degree=2):
    """Mean-free boundary probe: the trace of x y (degree 2) or x (degree 1), mean removed."""
    p = trace.space.nodes()[trace.space.boundary_dofs]
    u = p[:, 0] * p[:, 1] if degree == 2 else p[:, 0].copy()
    one = np.ones(len(u))
    return u - float(one @ (trace.mass @ u)) / float(one @ (trace.mass @ one))


def boundary_elliptic(ctx: TraceNormContext, u):
    """||u||_{H3/2} + ||u||_Linf against ||Lap u||_{H-1/2} for a mean-free boundary function.

    H^{3/2} is measured as ||u||_{H1/2} + ||grad u||_{H1/2} with the recovered vertex gradient.
    """
    tr2, tr1, bg = ctx.trace(2), ctx.trace(1), ctx.bg
    lap = h_minus_half_norm(ctx, load=-(tr2.stiffness @ u)).value
    uh = h_half_norm(ctx, u).value
    d = tr2.frame_grads(u)
    W = bg.vector(np.einsum("fqab,fqb->fqa", bg.gb_inv, d))
    gv = vertex_average(bg, W)
    gh = h_half_norm(ctx, tr1.from_surface_vertices(gv), kind="vector", order=1).value
    return uh + gh + float(np.abs(u).max()), lap


def boundary_gradient_dual(ctx: TraceNormContext, u):
    """(||u||_H1/2, ||grad u||_H-1/2, ||grad u||_L2), vector norms summed over chart components."""
    tr2, bg = ctx.trace(2), ctx.bg
    d = tr2.frame_grads(u)
    W = bg.vector(np.einsum("fqab,fqb->fqa", bg.gb_inv, d))
    dual = np.sqrt(sum(h_minus_half_norm(ctx, samples=W[..., k]).value ** 2 for k in range(3)))
    l2 = np.sqrt(bg.integrate((W * W).sum(-1)))
    return h_half_norm(ctx, u).value, float(dual), float(l2)


def check_inequality_ledger(*, quad, bg, ctx, radius: RadiusField | None = None, atlas: HarmonicAtlas | None = None,
                            gram: GramDeficit | None = None, uniform_cert: dict | None = None,
                            refined: IdentityResidualReport | None = None, hypothesis=None, volume=None,
                            eps=0.0, seed=42, n_random=10):
    """Measured LHS, RHS and ratio for every inequality the argument uses."""
    h = quad.mesh.h
    Lam = hypothesis.Lambda if hypothesis is not None else 0.0
    slack = 1.0 + 10.0 * h * h
    out = []
    if radius is not None:
        out.append(_ineq("max principle |X|", radius.report["max_abs_X"], slack, True))
        nh = radius.report.get("normal_h_half")
        if nh is not None:
            out.append(_ineq("extension of N: ||grad X|| <= 2||N||_H1/2", radius.report["grad_X_L2"],
                             2.0 * nh + 10.0 * h * h * Lam, True))
    if volume is not None:
        out.append(_ineq("volume defect", volume["lhs"], volume["rhs"] + volume["slack"], True))
    if atlas is not None:
        vq = atlas.coords.values(quad)
        mx = float(max(np.abs(atlas.coords.coef).max(), np.abs(vq).max()))
        out.append(_ineq("max principle |x^i|", mx, slack, True))
    space = ctx.space(2)
    fields = random_fields(space, n_random, seed)
    r6 = sobolev_l6_ratios(ctx, fields)
    rs = [a / b for a, b in r6]
    out.append(_ineq("Sobolev L6 <= grad L2 + H1/2 (random fields, worst)", *max(r6, key=lambda t: t[0] / t[1]), False,
                     {"ratios": rs}))
    rinf = linf_h2_ratios(quad, fields)
    out.append(_ineq("Linf <= H2 (random fields, worst)", *max(rinf, key=lambda t: t[0] / t[1]), False,
                     {"ratios": [a / b for a, b in rinf]}))
    tr2 = ctx.trace(2)
    for deg in (1, 2):
        u = boundary_probe(tr2, deg)
        lhs, rhs = boundary_elliptic(ctx, u)
        out.append(_ineq(f"boundary elliptic H3/2 + Linf <= Lap H-1/2 (probe degree {deg})", lhs, rhs, False))
        uh, gdual, gl2 = boundary_gradient_dual(ctx, u)
        out.append(_ineq(f"H1/2 <= grad H-1/2 (probe degree {deg})", uh, gdual, False))
        out.append(_ineq(f"grad H-1/2 <= grad L2 (probe degree {deg})", gdual, gl2, False))
    if uniform_cert is not None:
        lhs = (uniform_cert["log_phi_sup"] + uniform_cert["phi_minus_one_sup"] + uniform_cert["phi_minus_one_h_half"]
               + uniform_cert["grad_log_phi_h_half"])
        out.append(_ineq("uniformization factor <= eps", lhs, eps, False))
    if refined is not None:
        out.append(_ineq("refined Bochner LHS <= eps^2", refined.left, eps * eps, False))
    if gram is not None:
        out.append(_ineq("Gram deficit Linf + H1 <= eps", gram.report["B_Linf"] + gram.report["B_H1"], eps, False))
    return out
