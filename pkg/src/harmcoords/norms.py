"""Norms on the manifold and its boundary, trace norms and the Sobolev constant."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import factorized

from .fem import (AssembledForm, DiscreteField, FemSpace, TraceSpace, VolumeQuadrature, assemble, pcg,
                  solve_dirichlet)
from .metric import BoundaryGeometry


@dataclass
class NormReport:
    name: str
    value: float
    method: str
    residual: float | None = None
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        self.value = float(self.value)
        if not np.isfinite(self.value) or self.value < 0:
            raise ValueError(f"norm {self.name} is not a finite non-negative number: {self.value}")

    def to_dict(self):
        d = asdict(self)
        d.pop("extra")
        if self.residual is None:
            d.pop("residual")
        return d


# ---------------------------------------------------------------- pointwise norms

def pointwise_norm2(F, g, ginv, kind="scalar"):
    """|F|^2 with metric contractions; kind in scalar, vector, covector, tensor2, surface2."""
    F = np.asarray(F, float)
    if kind == "scalar":
        return F * F
    if kind == "vector":
        return (np.matmul(g, F[..., None])[..., 0] * F).sum(-1)
    if kind == "covector":
        return (np.matmul(ginv, F[..., None])[..., 0] * F).sum(-1)
    if kind in ("tensor2", "surface2"):
        # g^ac g^bd F_ab F_cd with symmetric g^-1
        return (np.matmul(np.matmul(ginv, F), ginv) * F).sum((-1, -2))
    if kind == "tensor3":
        return np.einsum("...ad,...be,...cf,...abc,...def->...", ginv, ginv, ginv, F, F, optimize=True)
    raise ValueError(f"unknown tensor kind {kind!r}")


def _domain(domain):
    if isinstance(domain, VolumeQuadrature):
        return domain.w, domain.g, domain.ginv, "L{p}(Sigma)"
    if isinstance(domain, BoundaryGeometry):
        return domain.weights, domain.g, np.linalg.inv(domain.g), "L{p}(dSigma)"
    raise TypeError("domain must be a VolumeQuadrature or a BoundaryGeometry")


def lp_norm(F, p, domain, kind="scalar", name=None) -> NormReport:
    """Metric-weighted L^p norm of samples F at the domain's quadrature points.

    Surface 2-tensors in the triangle frame use ``kind="surface2"`` and
    the induced metric.
    """
    w, g, ginv, label = _domain(domain)
    if kind == "surface2":
        g, ginv = domain.gb, domain.gb_inv
    n2 = pointwise_norm2(F, g, ginv, kind)
    n2 = np.maximum(n2, 0.0)
    if p == np.inf or p == "inf":
        val = float(np.sqrt(n2.max())) if n2.size else 0.0
        pl = "inf"
    else:
        p = float(p)
        if p not in (1.0, 2.0, 3.0, 4.0, 6.0):
            raise ValueError("p must be one of 1, 2, 3, 4, 6, inf")
        val = float((w * n2 ** (p / 2.0)).sum() ** (1.0 / p))
        pl = f"{p:g}"
    return NormReport(name or label.format(p=pl), val, "quadrature")


# ---------------------------------------------------------------- trace norms

@dataclass(eq=False)
class TraceNormContext:
    """Cached H1-type forms used by the trace norms of one (mesh, metric)."""

    quad: VolumeQuadrature
    bg: BoundaryGeometry
    tol: float = 1e-10
    _forms: dict = field(default_factory=dict)

    def space(self, order):
        key = ("space", order)
        if key not in self._forms:
            self._forms[key] = FemSpace(self.quad.mesh, order)
        return self._forms[key]

    def trace(self, order):
        key = ("trace", order)
        if key not in self._forms:
            self._forms[key] = TraceSpace(self.space(order), self.bg)
        return self._forms[key]

    def form(self, kind="scalar", order=2) -> AssembledForm:
        key = (kind, order)
        if key not in self._forms:
            sp_ = self.space(order)
            if kind == "scalar":
                f = assemble(sp_, self.quad.metric, "h1-energy", quad=self.quad)
            elif kind == "vector":
                f = assemble(sp_, self.quad.metric, "connection-h1", quad=self.quad)
            else:
                f = assemble(sp_, self.quad.metric, "tensor-h1", quad=self.quad, tensor=kind)
            self._forms[key] = f
        return self._forms[key]

    def put(self, kind, order, form):
        self._forms[(kind, order)] = form

    def drop(self, kind, order):
        """Forget a cached form; large vector and tensor forms are worth releasing."""
        self._forms.pop((kind, order), None)


def h_half_norm(ctx: TraceNormContext, data, kind="scalar", order=2, name=None) -> NormReport:
    """Trace norm: energy of the discrete h1-minimizing extension of boundary dof data."""
    form = ctx.form(kind, order)
    data = np.asarray(data, float)
    if not np.any(data):
        return NormReport(name or "H1/2(dSigma)", 0.0, "h1 extension", 0.0, {"extension": None})
    ext = solve_dirichlet(form, data, tol=ctx.tol)
    val = np.sqrt(max(form.energy(ext.coef), 0.0))
    return NormReport(name or "H1/2(dSigma)", val, "h1 extension", ext.info["residual"], {"extension": ext})


def h_minus_half_norm(ctx: TraceNormContext, data=None, samples=None, order=2, name=None, load=None) -> NormReport:
    """Dual norm of a scalar boundary field, given as boundary dofs, quadrature samples or a load vector.

    value^2 = b.S^{-1} b with b the load vector of the field and S the Schur
    complement of the h1 form on boundary dofs; S^{-1} b is the boundary part of
    the h1 Neumann solution with boundary load b. ``extra["maximizer"]`` holds
    G* = S^{-1} b.
    """
    form = ctx.form("scalar", order)
    tr = ctx.trace(order)
    if load is not None:
        b = np.asarray(load, float)
    elif samples is not None:
        b = tr.load(np.asarray(samples, float))
    else:
        b = tr.mass @ np.asarray(data, float)
    if not np.any(b):
        return NormReport(name or "H-1/2(dSigma)", 0.0, "schur dual", 0.0, {"maximizer": np.zeros(tr.n), "load": b})
    rhs = np.zeros(form.n)
    rhs[form.space.boundary_dofs] = b
    z, info = pcg(form.matrix, rhs, tol=ctx.tol)
    gstar = z[form.space.boundary_dofs]
    val = np.sqrt(max(float(b @ gstar), 0.0))
    return NormReport(name or "H-1/2(dSigma)", val, "schur dual", info.residual,
                      {"maximizer": gstar, "load": b, "extension": z})


def vertex_average(bg: BoundaryGeometry, samples):
    """Per-vertex weighted averages of quadrature samples (F, Q, ...)."""
    s = bg.surface
    w = np.einsum("fq,qa->fa", bg.weights, bg.bary)  # (F, 3)
    samples = np.asarray(samples, float)
    tail = samples.shape[2:]
    flat = samples.reshape(samples.shape[:2] + (-1,))
    acc = np.einsum("fq,qa,fqk->fak", bg.weights, bg.bary, flat)
    out = np.zeros((s.n_vertices, flat.shape[-1]))
    for k in range(flat.shape[-1]):
        out[:, k] = np.bincount(s.triangles.ravel(), weights=acc[..., k].ravel(), minlength=s.n_vertices)
    den = np.bincount(s.triangles.ravel(), weights=w.ravel(), minlength=s.n_vertices)
    return (out / den[:, None]).reshape((s.n_vertices,) + tail)


# ---------------------------------------------------------------- H^k norms

def h_k_norm(u: DiscreteField, quad: VolumeQuadrature, k=1, name=None) -> NormReport:
    """sqrt(sum_{m<=k} ||nabla^m u||^2) for a scalar field with covariant derivatives."""
    if u.ncomp != 1:
        raise ValueError("h_k_norm takes scalar fields")
    if k == 2 and u.space.order < 2:
        raise ValueError("H2 needs an order-2 field")
    if k not in (1, 2):
        raise ValueError("k must be 1 or 2")
    v = u.values(quad)
    du = u.grads(quad)
    tot = quad.integrate(v * v) + quad.integrate(pointwise_norm2(du, quad.g, quad.ginv, "covector"))
    if k == 2:
        H = u.covariant_hessian(quad)
        tot += quad.integrate(pointwise_norm2(H, quad.g, quad.ginv, "tensor2"))
    return NormReport(name or f"H{k}(Sigma)", np.sqrt(tot), "element derivatives")


# ---------------------------------------------------------------- Sobolev constant

@dataclass(eq=False)
class SobolevProblem:
    """Discrete quotient ||f - mean_dSigma f||_L6 / ||grad f||_L2 on the P1 space."""

    quad: VolumeQuadrature
    bg: BoundaryGeometry

    def __post_init__(self):
        space = FemSpace(self.quad.mesh, 1)
        self.space = space
        K = assemble(space, self.quad.metric, "dirichlet-energy", quad=self.quad).matrix
        M = assemble(space, self.quad.metric, "mass", quad=self.quad).matrix
        self.K = K
        self._pre = factorized((K + M).tocsc())
        nt, Q = self.quad.w.shape
        lam = self.quad.rule.points
        rows = np.repeat(np.arange(nt * Q), 4)
        cols = np.repeat(space.cell_dofs, Q, axis=0).ravel()
        vals = np.tile(lam, (nt, 1)).ravel()
        self.B = sp.csr_matrix((vals, (rows, cols)), shape=(nt * Q, space.n_dofs))
        self.wq = self.quad.w.ravel()
        tr = TraceSpace(space, self.bg)
        c = np.zeros(space.n_dofs)
        c[space.boundary_dofs] = tr.load(np.ones_like(self.bg.weights))
        self.mean = c / self.bg.area

    def quotient(self, f):
        v = self.B @ f - self.mean @ f
        v2 = v * v
        num = float(self.wq @ (v2 * v2 * v2)) ** (1.0 / 6.0)
        den = float(np.sqrt(max(f @ (self.K @ f), 0.0)))
        return num / den if den > 0 else 0.0

    def log_gradient(self, f):
        v = self.B @ f - self.mean @ f
        v4 = (v * v) ** 2
        s6 = float(self.wq @ (v4 * v * v))
        Kf = self.K @ f
        e = float(f @ Kf)
        gv = self.wq * v4 * v / s6
        g6 = self.B.T @ gv - self.mean * gv.sum()
        return g6 - Kf / e

    def starts(self, n, seed):
        """Smooth start functions: random quadratics plus a boundary-centred Gaussian bump."""
        rng = np.random.default_rng(seed)
        x = self.space.nodes()
        out = []
        for _ in range(n):
            b = rng.normal(size=3)
            Qm = rng.normal(size=(3, 3))
            c = rng.normal(size=3)
            c *= rng.uniform(0.5, 1.0) / np.linalg.norm(c)
            width = rng.uniform(0.15, 0.5)
            amp = rng.uniform(1.0, 4.0)
            f = x @ b + 0.5 * np.einsum("ni,ij,nj->n", x, Qm, x)
            f += amp * np.exp(-((x - c) ** 2).sum(1) / (2 * width**2))
            out.append(f)
        return out


def estimate_sobolev_constant(quad: VolumeQuadrature, bg: BoundaryGeometry, restarts=5, iterations=30,
                              seed=42, problem: SobolevProblem | None = None) -> NormReport:
    """Best quotient found by preconditioned gradient ascent from smooth random starts.

    The result is a valid quotient of the discrete space, hence a lower bound
    of the discrete Sobolev constant. Starts are a fixed seeded sequence, so
    more restarts never lower the estimate.
    """
    pb = problem or SobolevProblem(quad, bg)
    best, best_f, history = 0.0, None, []
    for f in pb.starts(restarts, seed):
        if f @ (pb.K @ f) <= 1e-14 * max(f @ f, 1e-300):
            continue  # constant start
        q = pb.quotient(f)
        step = 1.0
        for _ in range(iterations):
            grad = pb.log_gradient(f)
            d = pb._pre(grad)
            slope = float(grad @ d)
            if slope <= 0:
                break
            scale = np.sqrt(max(f @ (pb.K @ f), 1e-300)) / np.sqrt(max(d @ (pb.K @ d), 1e-300))
            accepted = False
            for _ in range(30):
                trial = f + step * scale * d
                qt = pb.quotient(trial)
                if np.log(max(qt, 1e-300)) >= np.log(q) + 1e-4 * step * scale * slope:
                    f, q, accepted = trial / np.sqrt(trial @ (pb.K @ trial)), qt, True
                    step = min(2.0 * step, 4.0)
                    break
                step *= 0.5
            if not accepted:
                break
        history.append(q)
        if q > best:
            best, best_f = q, f
    if best_f is None:
        raise ValueError("all Sobolev starts were degenerate")
    return NormReport("c_Sob", best, f"gradient ascent, {restarts} restarts x {iterations} steps",
                      extra={"maximizer": best_f, "per_start": history, "problem": pb})


# ---------------------------------------------------------------- hypothesis block

@dataclass
class HypothesisReport:
    volume: float
    inverse_boundary_area: float
    c_sob: float
    normal_h_half: float
    Lambda: float
    eps_R: float
    eps_theta: float

    @classmethod
    def build(cls, volume, area, c_sob, n_half, eps_R, eps_theta):
        vals = [volume, 1.0 / area, c_sob, n_half]
        return cls(volume, 1.0 / area, c_sob, n_half, float(max(vals)), eps_R, eps_theta)

    def to_dict(self):
        return asdict(self)


def riemann_l2(quad: VolumeQuadrature) -> NormReport:
    c = quad.curvature()
    return NormReport("L2(Sigma) |Rm|", np.sqrt(max(quad.integrate(c["riemann2"]), 0.0)), "analytic curvature")


def theta_deviation_h_half(ctx: TraceNormContext) -> NormReport:
    """||theta - gcheck||_{H1/2} from vertex-averaged ambient tensors and a P1 tensor extension."""
    bg = ctx.bg
    T = bg.ambient(bg.theta - bg.gb)
    vt = vertex_average(bg, T).reshape(bg.surface.n_vertices, 9)
    data = ctx.trace(1).from_surface_vertices(vt)
    rep = h_half_norm(ctx, data, kind="tensor2", order=1, name="H1/2(dSigma) theta-gcheck")
    rep.method = "P1 tensor h1 extension of vertex-averaged ambient tensor"
    return rep
