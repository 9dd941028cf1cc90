"""Metric families with analytic derivatives, curvature and boundary geometry.

Index conventions for arrays over a batch of points ``(..., )``:

* ``g[..., i, j]``, ``dg[..., k, i, j] = d_k g_ij``,
  ``d2g[..., l, k, i, j] = d_l d_k g_ij``
* ``gamma[..., k, i, j] = Gamma^k_ij``
* ``riemann[..., a, b, c, d] = g(R(e_c, e_d) e_b, e_a)`` with
  ``R(X, Y) Z = nabla_X nabla_Y Z - nabla_Y nabla_X Z - nabla_[X,Y] Z``
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateGeometryError, MetricError
from .mesh import SurfaceMesh, TetMesh, simplex_rule

FAMILIES = ("flat", "conformal", "bump-tensor")


# ---------------------------------------------------------------- profiles

def _cutoff(x, R):
    """(1 - |x|^2/R^2)^3 inside the radius-R ball, with gradient and Hessian."""
    u = 1.0 - (x * x).sum(-1) / R**2
    inside = u > 0
    u = np.where(inside, u, 0.0)
    du = -2.0 * x / R**2
    eye = np.eye(3)
    val = u**3
    grad = 3.0 * u[..., None] ** 2 * du
    hess = 6.0 * u[..., None, None] * du[..., :, None] * du[..., None, :] + 3.0 * u[..., None, None] ** 2 * (-2.0 / R**2) * eye
    return val, grad, hess


def _quadratic(x, c, b, Q):
    """c + b.x + x.Q.x/2 with gradient and Hessian."""
    val = c + x @ b + 0.5 * np.einsum("...i,ij,...j->...", x, Q, x)
    grad = b + x @ Q.T
    hess = np.broadcast_to(Q, x.shape[:-1] + (3, 3))
    return val, grad, hess


# fixed profile data of the conformal and bump-tensor families
PROFILE_B = np.array([-0.3, 0.2, 0.1])
PROFILE_Q = np.array([[0.6, 1.0, 0.0], [1.0, -0.4, 0.4], [0.0, 0.4, 1.0]])
BUMP_C = np.array([[0.5, 0.3, 0.0], [0.3, -0.4, 0.2], [0.0, 0.2, 0.3]])
BUMP_L = np.zeros((3, 3, 3))
BUMP_L[0, 1, 2] = BUMP_L[1, 0, 2] = 0.5
BUMP_L[2, 2, 0] = -0.4
BUMP_L[0, 0, 1] = 0.3


def conformal_profile(x, amplitude=1.0, support=2.0):
    """The fixed polynomial-times-cutoff profile f, with gradient and Hessian."""
    p, dp, ddp = _quadratic(x, 0.0, PROFILE_B, PROFILE_Q)
    c, dc, ddc = _cutoff(x, support)
    f = p * c
    df = dp * c[..., None] + p[..., None] * dc
    ddf = (ddp * c[..., None, None] + dp[..., :, None] * dc[..., None, :]
           + dc[..., :, None] * dp[..., None, :] + p[..., None, None] * ddc)
    return amplitude * f, amplitude * df, amplitude * ddf


def bump_field(x, support=2.0):
    """Symmetric field h_ij = cutoff(x) (C_ij + L_ijk x_k) with derivatives."""
    c, dc, ddc = _cutoff(x, support)
    S = BUMP_C + np.einsum("ijk,...k->...ij", BUMP_L, x)
    h = c[..., None, None] * S
    dh = dc[..., :, None, None] * S[..., None, :, :] + c[..., None, None, None] * np.moveaxis(BUMP_L, 2, 0)
    d2h = (ddc[..., :, :, None, None] * S[..., None, None, :, :]
           + dc[..., None, :, None, None] * np.moveaxis(BUMP_L, 2, 0)[:, None]
           + dc[..., :, None, None, None] * np.moveaxis(BUMP_L, 2, 0)[None])
    return h, dh, d2h


# ---------------------------------------------------------------- metric

@dataclass(frozen=True, eq=False)
class MetricField:
    """Analytic metric on the chart.

    ``rotation`` R gives the pushed-forward metric R g(R^T x) R^T, used to
    test equivariance.
    """

    family: str
    eps: float = 0.0
    amplitude: float = 1.0
    support: float = 2.0
    rotation: np.ndarray | None = None

    @property
    def descriptor(self):
        d = {"family": self.family, "eps": self.eps}
        if self.family != "flat":
            d.update(amplitude=self.amplitude, support=self.support)
        if self.rotation is not None:
            d["rotation"] = np.asarray(self.rotation).tolist()
        return d

    @property
    def is_flat(self):
        return self.family == "flat" or self.eps == 0.0

    def _raw(self, x, order):
        shape = x.shape[:-1]
        eye = np.broadcast_to(np.eye(3), shape + (3, 3))
        if self.family == "flat":
            g = eye.copy()
            dg = np.zeros(shape + (3, 3, 3)) if order >= 1 else None
            d2g = np.zeros(shape + (3, 3, 3, 3)) if order >= 2 else None
            return g, dg, d2g
        if self.family == "conformal":
            f, df, ddf = conformal_profile(x, self.amplitude, self.support)
            e = np.exp(2.0 * self.eps * f)
            g = e[..., None, None] * eye
            dg = d2g = None
            if order >= 1:
                dg = (2.0 * self.eps * df * e[..., None])[..., :, None, None] * eye[..., None, :, :]
            if order >= 2:
                s = 2.0 * self.eps * ddf + 4.0 * self.eps**2 * df[..., :, None] * df[..., None, :]
                d2g = (s * e[..., None, None])[..., :, :, None, None] * eye[..., None, None, :, :]
            return g, dg, d2g
        if self.family == "bump-tensor":
            h, dh, d2h = bump_field(x, self.support)
            return eye + self.eps * h, self.eps * dh, self.eps * d2h
        raise MetricError(f"unknown metric family {self.family!r}")

    def evaluate(self, x, order=2, check=True):
        """Return (g, dg, d2g) at chart points x of shape (..., 3)."""
        x = np.asarray(x, dtype=float)
        R = self.rotation
        if R is None:
            g, dg, d2g = self._raw(x, order)
        else:
            R = np.asarray(R, float)
            g, dg, d2g = self._raw(x @ R, order)  # R^T x, row-vector form
            g = np.einsum("ia,jb,...ab->...ij", R, R, g)
            if dg is not None:
                dg = np.einsum("kc,ia,jb,...cab->...kij", R, R, R, dg)
            if d2g is not None:
                d2g = np.einsum("ld,kc,ia,jb,...dcab->...lkij", R, R, R, R, d2g)
        if check:
            check_spd(g)
        return g, dg, d2g


def check_spd(g):
    try:
        np.linalg.cholesky(g)
    except np.linalg.LinAlgError:
        lam = np.linalg.eigvalsh(g).min()
        raise MetricError(f"metric not positive definite (smallest eigenvalue {lam:.3g})") from None


def probe_points(radius=1.0, n=9):
    t = np.linspace(-radius, radius, n)
    p = np.stack(np.meshgrid(t, t, t, indexing="ij"), -1).reshape(-1, 3)
    return p[np.linalg.norm(p, axis=1) <= radius]


def make_metric(family, eps=0.0, amplitude=1.0, support=2.0, rotation=None, probe_radius=1.0) -> MetricField:
    """Build a metric family and check it is SPD on probe points of the chart ball."""
    if family not in FAMILIES:
        raise MetricError(f"unknown metric family {family!r}; expected one of {FAMILIES}")
    if not np.isfinite(eps) or eps < 0:
        raise MetricError(f"eps must be finite and >= 0, got {eps}")
    if support <= 0:
        raise MetricError("support radius must be positive")
    if rotation is not None:
        R = np.asarray(rotation, float)
        if R.shape != (3, 3) or not np.allclose(R @ R.T, np.eye(3), atol=1e-12) or np.linalg.det(R) < 0:
            raise MetricError("rotation must be a proper orthogonal 3x3 matrix")
        rotation = R
    m = MetricField(family, float(eps), float(amplitude), float(support), rotation)
    pts = probe_points(probe_radius)
    sph = np.random.default_rng(0).normal(size=(200, 3))
    pts = np.vstack([pts, probe_radius * sph / np.linalg.norm(sph, axis=1)[:, None]])
    m.evaluate(pts, order=0)
    return m


# ---------------------------------------------------------------- curvature

def christoffel_first(dg):
    """Gamma_{m,ij} = (d_i g_jm + d_j g_im - d_m g_ij)/2, shape (..., m, i, j)."""
    a = np.einsum("...ijm->...mij", dg)
    b = np.einsum("...jim->...mij", dg)
    return 0.5 * (a + b - dg)


def christoffel_from(g, dg, ginv=None):
    if ginv is None:
        ginv = np.linalg.inv(g)
    first = christoffel_first(dg)
    return np.matmul(ginv, first.reshape(first.shape[:-2] + (9,))).reshape(first.shape)


def christoffel(metric: MetricField, points):
    """Gamma^k_ij at the given points, shape (..., 3, 3, 3)."""
    g, dg, _ = metric.evaluate(points, order=1)
    return christoffel_from(g, dg)


def christoffel_derivative(g, dg, d2g, ginv=None):
    """d_l Gamma^k_ij, shape (..., l, k, i, j)."""
    if ginv is None:
        ginv = np.linalg.inv(g)
    first = christoffel_first(dg)
    d_first = 0.5 * (np.einsum("...lijm->...lmij", d2g) + np.einsum("...ljim->...lmij", d2g) - d2g)
    gi = ginv[..., None, :, :]
    dginv = -np.matmul(np.matmul(gi, dg), gi)                                  # (..., l, k, m)
    out = np.matmul(dginv, first.reshape(first.shape[:-3] + (1, 3, 9)))
    out += np.matmul(gi, d_first.reshape(d_first.shape[:-2] + (9,)))
    return out.reshape(d_first.shape)


@dataclass
class CurvatureSample:
    gamma: np.ndarray
    riemann: np.ndarray
    ricci: np.ndarray
    scalar: np.ndarray
    einstein: np.ndarray


def curvature_from(g, dg, d2g, ginv=None) -> CurvatureSample:
    if ginv is None:
        ginv = np.linalg.inv(g)
    gam = christoffel_from(g, dg, ginv)
    dgam = christoffel_derivative(g, dg, d2g, ginv)
    # R^l_{kij} = d_i Gamma^l_jk - d_j Gamma^l_ik + Gamma^l_im Gamma^m_jk - Gamma^l_jm Gamma^m_ik
    t1 = np.einsum("...iljk->...lkij", dgam)
    quad = np.einsum("...lim,...mjk->...lkij", gam, gam)
    rup = t1 - np.swapaxes(t1, -1, -2) + quad - np.swapaxes(quad, -1, -2)
    riem = np.einsum("...am,...mbcd->...abcd", g, rup)
    ric = np.einsum("...adab->...bd", rup)
    ric = 0.5 * (ric + np.swapaxes(ric, -1, -2))
    scal = np.einsum("...ij,...ij->...", ginv, ric)
    ein = ric - 0.5 * scal[..., None, None] * g
    return CurvatureSample(gam, riem, ric, scal, ein)


def curvature(metric: MetricField, points) -> CurvatureSample:
    g, dg, d2g = metric.evaluate(points, order=2)
    return curvature_from(g, dg, d2g)


def riemann_norm2(riem, ginv):
    """|Rm|_g^2 = g^{aa'} g^{bb'} g^{cc'} g^{dd'} R_abcd R_a'b'c'd'."""
    up = riem
    for _ in range(4):
        # raise the leading index and rotate it to the back; after four passes the order is restored
        up = np.matmul(np.moveaxis(up, -4, -1).reshape(riem.shape[:-4] + (27, 3)), ginv).reshape(riem.shape)
    return (up * riem).sum((-1, -2, -3, -4))


def riemann_from_ricci(ricci, g):
    """Three-dimensional Riemann tensor from Ricci (Weyl tensor vanishes)."""
    scal = np.einsum("...ij,...ij->...", np.linalg.inv(g), ricci)
    P = ricci - 0.25 * scal[..., None, None] * g

    def kn(a, b):  # Kulkarni-Nomizu product, R_abcd convention g(R(e_c,e_d)e_b, e_a)
        return (np.einsum("...ac,...bd->...abcd", a, b) + np.einsum("...bd,...ac->...abcd", a, b)
                - np.einsum("...ad,...bc->...abcd", a, b) - np.einsum("...bc,...ad->...abcd", a, b))

    return kn(P, g)


# ---------------------------------------------------------------- boundary geometry

@dataclass(eq=False)
class BoundaryGeometry:
    """Boundary data on the quadrature points of each boundary triangle.

    Arrays of shape (F, Q, ...) are per triangle and quadrature point;
    triangle tangents are ``t1 = p1 - p0``, ``t2 = p2 - p0`` so surface
    2-tensors are given in that frame.
    """

    surface: SurfaceMesh
    bary: np.ndarray            # (Q, 3)
    points: np.ndarray          # (F, Q, 3)
    weights: np.ndarray         # (F, Q) area weights of the induced metric
    tangents: np.ndarray        # (F, 2, 3)
    g: np.ndarray               # (F, Q, 3, 3)
    gb: np.ndarray              # (F, Q, 2, 2) induced metric
    gb_inv: np.ndarray
    normal: np.ndarray          # (F, Q, 3) g-unit outward normal (exact face normal)
    vertex_normals: np.ndarray  # (V, 3) g-unit vertex normals
    theta: np.ndarray           # (F, Q, 2, 2)
    vertex_K: np.ndarray        # (V,) angle defect / dual area
    angle_defect: np.ndarray    # (V,)
    dual_areas: np.ndarray      # (V,) induced-metric dual areas
    tri_areas: np.ndarray       # (F,)
    edge_lengths: np.ndarray    # (E,) induced-metric surface edge lengths
    G_NN: np.ndarray            # (F, Q)

    @property
    def tr_theta(self):
        return np.einsum("...ab,...ab->...", self.gb_inv, self.theta)

    @property
    def theta_hat(self):
        return self.theta - 0.5 * self.tr_theta[..., None, None] * self.gb

    def norm2(self, T):
        """Pointwise |T|^2 of surface 2-tensors using the inverse induced metric."""
        return np.einsum("...ac,...bd,...ab,...cd->...", self.gb_inv, self.gb_inv, T, T)

    @property
    def theta_hat_norm2(self):
        return self.norm2(self.theta_hat)

    @property
    def K(self):
        """Angle-defect curvature interpolated linearly to quadrature points."""
        return self.interpolate(self.vertex_K)

    @property
    def area(self):
        return float(self.weights.sum())

    def integrate(self, f):
        return float(np.einsum("fq,fq->", self.weights, f))

    def interpolate(self, vertex_values):
        """P1 interpolation of per-vertex values (V, ...) to quadrature points."""
        v = np.asarray(vertex_values)[self.surface.triangles]  # (F, 3, ...)
        return np.einsum("qa,fa...->fq...", self.bary, v)

    def ambient(self, T):
        """Surface 2-tensors (F, Q, 2, 2) as ambient covariant tensors vanishing on N."""
        tmat = np.broadcast_to(self.tangents[:, None], self.points.shape[:2] + (2, 3))
        E = np.einsum("fqab,fqbi,fqij->fqaj", self.gb_inv, tmat, self.g)
        return np.einsum("fqai,fqab,fqbj->fqij", E, T, E)

    def vector(self, w):
        """Tangent vectors with frame components w (F, Q, 2) as chart vectors."""
        return np.einsum("fqa,fai->fqi", w, self.tangents)


def _tri_setup(surface: SurfaceMesh):
    p = surface.vertices[surface.triangles]
    t = np.stack([p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]], axis=1)
    return p, t


def induced_edge_lengths(metric, surface: SurfaceMesh, degree=7):
    rule = simplex_rule(1, degree)
    a = surface.vertices[surface.edges[:, 0]]
    b = surface.vertices[surface.edges[:, 1]]
    x = np.einsum("qk,kei->eqi", rule.points, np.stack([a, b]))
    g, _, _ = metric.evaluate(x, order=0)
    t = b - a
    speed = np.sqrt(np.einsum("ei,eqij,ej->eq", t, g, t))
    return speed @ rule.weights


def angle_defects(surface: SurfaceMesh, lengths):
    """Vertex angle defects and triangle areas of the edge-length metric."""
    te = surface.tri_edges  # opposite vertex 2, 0, 1 respectively
    l01, l12, l02 = lengths[te[:, 0]], lengths[te[:, 1]], lengths[te[:, 2]]
    a, b, c = l12, l02, l01  # sides opposite vertices 0, 1, 2

    def ang(opp, s1, s2):
        return np.arccos(np.clip((s1 * s1 + s2 * s2 - opp * opp) / (2 * s1 * s2), -1.0, 1.0))

    angles = np.stack([ang(a, b, c), ang(b, a, c), ang(c, a, b)], axis=1)
    s = 0.5 * (a + b + c)
    heron = np.sqrt(np.maximum(s * (s - a) * (s - b) * (s - c), 0.0))
    total = np.bincount(surface.triangles.ravel(), weights=angles.ravel(), minlength=surface.n_vertices)
    return 2 * np.pi - total, heron, angles


def boundary_geometry(metric: MetricField, surface: SurfaceMesh, mesh: TetMesh | None = None, degree=5) -> BoundaryGeometry:
    """N, induced metric, second fundamental form, angle-defect K and G(N, N)."""
    rule = simplex_rule(2, degree)
    bary = rule.points
    p, t = _tri_setup(surface)
    F, Q = len(p), len(bary)
    x = np.einsum("qa,fai->fqi", bary, p)
    g, dg, d2g = metric.evaluate(x, order=2)
    ginv = np.linalg.inv(g)
    tq = np.broadcast_to(t[:, None], (F, Q, 2, 3))
    gb = np.einsum("fqai,fqij,fqbj->fqab", tq, g, tq)
    detb = gb[..., 0, 0] * gb[..., 1, 1] - gb[..., 0, 1] ** 2
    if np.any(detb <= 0):
        raise DegenerateGeometryError(f"{int((detb <= 0).any(axis=1).sum())} degenerate boundary triangles")
    gb_inv = np.linalg.inv(gb)
    weights = rule.weights[None, :] * np.sqrt(detb)
    tri_area = weights.sum(axis=1)

    nu = np.cross(t[:, 0], t[:, 1])  # outward chart normal (covector)
    nvec = np.einsum("fqij,fj->fqi", ginv, nu)
    normal = nvec / np.sqrt(np.einsum("fqi,fi->fq", nvec, nu))[..., None]

    # vertex normals: g(v)-unit face normals averaged with induced-area weights
    gv, _, _ = metric.evaluate(surface.vertices, order=0)
    gv_inv = np.linalg.inv(gv)
    V = surface.n_vertices
    acc = np.zeros((V, 3))
    for k in range(3):
        vid = surface.triangles[:, k]
        nk = np.einsum("fij,fj->fi", gv_inv[vid], nu)
        nk /= np.sqrt(np.einsum("fi,fi->f", nk, nu))[:, None]
        for c in range(3):
            acc[:, c] += np.bincount(vid, weights=tri_area * nk[:, c], minlength=V)
    vn = acc / np.sqrt(np.einsum("vi,vij,vj->v", acc, gv, acc))[:, None]

    # theta_ab = g(nabla_{t_a} Ntilde, t_b) with Ntilde the P1 interpolant of vn
    nt = np.einsum("qa,fai->fqi", bary, vn[surface.triangles])
    dN = np.stack([vn[surface.triangles[:, 1]] - vn[surface.triangles[:, 0]],
                   vn[surface.triangles[:, 2]] - vn[surface.triangles[:, 0]]], axis=1)  # (F, 2, 3)
    gam = christoffel_from(g, dg, ginv)
    cov = dN[:, None] + np.einsum("fqkij,fai,fqj->fqak", gam, t, nt)
    theta = np.einsum("fqak,fqkl,fbl->fqab", cov, g, t)
    theta = 0.5 * (theta + np.swapaxes(theta, -1, -2))

    lengths = induced_edge_lengths(metric, surface)
    defect, _, _ = angle_defects(surface, lengths)
    dual = np.bincount(surface.triangles.ravel(), weights=np.repeat(tri_area / 3.0, 3), minlength=V)
    Kv = defect / dual

    curv = curvature_from(g, dg, d2g, ginv)
    gnn = np.einsum("fqi,fqij,fqj->fq", normal, curv.einstein, normal)

    return BoundaryGeometry(surface, bary, x, weights, t, g, gb, gb_inv, normal, vn, theta,
                            Kv, defect, dual, tri_area, lengths, gnn)
