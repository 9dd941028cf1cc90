"""Uniformization of the boundary: a discrete conformal flow onto the unit sphere."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .errors import FlowDivergenceError, TopologyError
from .fem import assemble_surface, surface_p1_frame_grads
from .mesh import SurfaceMesh
from .metric import BoundaryGeometry, angle_defects
from .norms import NormReport, TraceNormContext, h_half_norm, h_minus_half_norm, lp_norm, vertex_average


@dataclass(eq=False)
class ConformalMap:
    """Boundary map to S^2 with per-vertex conformal factor phi."""

    surface: SurfaceMesh
    images: np.ndarray   # (V, 3) unit vectors
    phi: np.ndarray      # (V,)
    steps: int
    energies: list
    quality: dict = field(default_factory=dict)

    @property
    def log_phi(self):
        return np.log(self.phi)


def sphere_fit(points):
    """Least-squares sphere through points: (centre, radius, rms residual)."""
    A = np.column_stack([2.0 * points, np.ones(len(points))])
    b = (points * points).sum(1)
    sol, *_ = np.linalg.lstsq(A, b, rcond=None)
    c = sol[:3]
    R = float(np.sqrt(sol[3] + c @ c))
    res = float(np.sqrt(np.mean((np.linalg.norm(points - c, axis=1) - R) ** 2)))
    return c, R, res


def chart_stiffness(surface: SurfaceMesh, vertices=None):
    """Cotangent stiffness of the triangulation with the Euclidean metric of the given positions."""
    p = (surface.vertices if vertices is None else vertices)[surface.triangles]
    tri = surface.triangles
    rows, cols, vals = [], [], []
    for k in range(3):
        i, j, o = tri[:, (k + 1) % 3], tri[:, (k + 2) % 3], k
        u = p[:, (k + 1) % 3] - p[:, o]
        v = p[:, (k + 2) % 3] - p[:, o]
        cot = (u * v).sum(1) / np.linalg.norm(np.cross(u, v), axis=1)
        w = 0.5 * cot
        rows += [i, j, i, j]
        cols += [j, i, i, j]
        vals += [-w, -w, w, w]
    n = surface.n_vertices
    return sp.coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n)).tocsr()


def image_mass(surface: SurfaceMesh, f):
    """Consistent P1 mass of the chordal image triangulation."""
    p = f[surface.triangles]
    area = 0.5 * np.linalg.norm(np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]), axis=1)
    tri = surface.triangles
    loc = (np.ones((3, 3)) + np.eye(3))[None] * (area / 12.0)[:, None, None]
    rows = np.repeat(tri[:, :, None], 3, axis=2)
    cols = np.swapaxes(rows, 1, 2)
    n = surface.n_vertices
    return sp.coo_matrix((loc.ravel(), (rows.ravel(), cols.ravel())), shape=(n, n)).tocsr()


def dual_areas(surface: SurfaceMesh, f):
    p = f[surface.triangles]
    area = 0.5 * np.linalg.norm(np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]), axis=1)
    return np.bincount(surface.triangles.ravel(), weights=np.repeat(area / 3.0, 3), minlength=surface.n_vertices)


def _centroid(M, f):
    m = np.asarray(M.sum(axis=1)).ravel()
    return (m @ f) / m.sum()


def uniformize(surface: SurfaceMesh, bg: BoundaryGeometry, tau=0.1, max_steps=500, tol=1e-9,
               growth_limit=20) -> ConformalMap:
    """Conformal map of (boundary, induced metric) onto the round unit sphere.

    Implicit steps (M_t + tau S) f = M_t f + tau c with the fixed induced-metric
    stiffness S and the mass M_t of the current image, followed by recentring
    the mass centroid and projection to the sphere. The load c = S_ref f0 makes
    the radial projection f0 stationary for the Euclidean metric of a
    cospherical boundary; it is zero otherwise. Steps that raise the energy
    1/2 f.S f - f.c are rejected and tau halved.
    """
    if surface.n_components != 1:
        raise TopologyError(f"boundary has {surface.n_components} components")
    if surface.euler_characteristic != 2:
        raise TopologyError(f"boundary Euler characteristic is {surface.euler_characteristic}, need 2")
    S = assemble_surface(surface, bg).stiffness
    X = np.asarray(surface.vertices)
    centre, R, res = sphere_fit(X)
    f0 = X - centre
    f0 /= np.linalg.norm(f0, axis=1)[:, None]
    cospherical = res < 1e-9 * R
    c = chart_stiffness(surface) @ f0 if cospherical else np.zeros_like(f0)
    anchor = _centroid(image_mass(surface, f0), f0)

    def energy(f):
        return float(0.5 * np.einsum("ik,ik->", f, S @ f) - np.einsum("ik,ik->", f, c))

    f = f0.copy()
    E = energy(f)
    energies = [E]
    prev, grow, steps, rejected = np.inf, 0, 0, 0
    while steps < max_steps:
        M = image_mass(surface, f)
        lu = splu((M + tau * S).tocsc())
        rhs = M @ f + tau * c
        g = np.column_stack([lu.solve(rhs[:, k]) for k in range(3)])
        g -= _centroid(image_mass(surface, g), g) - anchor
        g /= np.linalg.norm(g, axis=1)[:, None]
        En = energy(g)
        if En > E + 1e-13 * max(abs(E), 1.0):
            tau *= 0.5
            rejected += 1
            if tau < 1e-12:
                break
            continue
        upd = float(np.abs(g - f).max())
        f, E = g, En
        energies.append(E)
        steps += 1
        grow = grow + 1 if upd > prev else 0
        if grow >= growth_limit:
            raise FlowDivergenceError(f"flow update grew for {grow} consecutive steps")
        prev = upd
        if upd < tol:
            break

    phi = np.sqrt(bg.dual_areas / dual_areas(surface, f))
    cm = ConformalMap(surface, f, phi, steps, energies)
    cm.quality = conformal_quality(cm, bg)
    cm.quality.update(cospherical_start=bool(cospherical), rejected_steps=rejected, final_tau=tau,
                      final_update=float(prev) if np.isfinite(prev) else 0.0)
    return cm


def conformal_quality(cm: ConformalMap, bg: BoundaryGeometry):
    """Angle distortion against the induced metric and the per-triangle factor cross-check."""
    s = cm.surface
    _, _, ang_g = angle_defects(s, bg.edge_lengths)
    img_len = np.linalg.norm(cm.images[s.edges[:, 1]] - cm.images[s.edges[:, 0]], axis=1)
    _, img_area, ang_s = angle_defects(s, img_len)
    tri_phi = np.sqrt(bg.tri_areas / img_area)
    vert_phi = cm.phi[s.triangles].mean(axis=1)
    area_acc = abs(float((cm.phi**2 * dual_areas(s, cm.images)).sum()) - float(bg.dual_areas.sum())) / float(bg.dual_areas.sum())
    return {
        "max_angle_distortion": float(np.abs(ang_g - ang_s).max()),
        "triangle_factor_mismatch": float(np.abs(tri_phi - vert_phi).max()),
        "area_accounting_residual": area_acc,
        "unit_length_error": float(np.abs(np.linalg.norm(cm.images, axis=1) - 1.0).max()),
    }


# ---------------------------------------------------------------- checks

def gauss_rhs(bg: BoundaryGeometry):
    """1 - G_NN + (tr theta - 2) + (tr theta - 2)^2/4 - |theta hat|^2/2 at boundary points."""
    t = bg.tr_theta - 2.0
    return 1.0 - bg.G_NN + t + 0.25 * t * t - 0.5 * bg.theta_hat_norm2


def gauss_equation_check(bg: BoundaryGeometry, ctx: TraceNormContext | None = None):
    """L2 and H^{-1/2} norms of intrinsic K minus the extrinsic Gauss right side."""
    r = bg.K - gauss_rhs(bg)
    out = {"L2": lp_norm(r, 2, bg, name="Gauss residual L2(dSigma)")}
    if ctx is not None:
        out["H-1/2"] = h_minus_half_norm(ctx, samples=r, name="Gauss residual H-1/2(dSigma)")
    return out


def conformal_factor_residual(cm: ConformalMap, bg: BoundaryGeometry, ctx: TraceNormContext) -> NormReport:
    """H^{-1/2} norm of Lap(log phi) + (K - 1) - (phi^-2 - 1), tested weakly against trace functions."""
    tr = ctx.trace(2)
    dlog = surface_p1_frame_grads(bg, cm.log_phi)  # (F, 2)
    dlog = np.broadcast_to(dlog[:, None], bg.weights.shape + (2,))
    phi_q = bg.interpolate(cm.phi)
    b = -tr.load_gradient(dlog) + tr.load(bg.K - phi_q**-2)
    form = ctx.form("scalar", 2)
    from .fem import pcg
    rhs = np.zeros(form.n)
    rhs[form.space.boundary_dofs] = b
    z, info = pcg(form.matrix, rhs, tol=ctx.tol)
    val = np.sqrt(max(float(b @ z[form.space.boundary_dofs]), 0.0))
    return NormReport("conformal factor residual H-1/2(dSigma)", val, "weak residual, schur dual", info.residual)


def log_phi_gradient_vertices(cm: ConformalMap, bg: BoundaryGeometry):
    """Surface gradient of log phi as chart vectors, averaged to vertices."""
    d = surface_p1_frame_grads(bg, cm.log_phi)
    w = np.einsum("fqab,fb->fqa", bg.gb_inv, d)
    return vertex_average(bg, bg.vector(w))


def certify_uniformization(cm: ConformalMap, bg: BoundaryGeometry, ctx: TraceNormContext, eps_scale=None):
    """Smallness certificate for phi: sup, trace norms and the conformal-factor residual."""
    tr2 = ctx.trace(2)
    tr1 = ctx.trace(1)
    sup = float(np.abs(cm.phi - 1.0).max())
    half = h_half_norm(ctx, tr2.from_surface_vertices(cm.phi - 1.0), name="H1/2(dSigma) phi-1")
    grad = h_half_norm(ctx, tr1.from_surface_vertices(log_phi_gradient_vertices(cm, bg)), kind="vector", order=1,
                       name="H1/2(dSigma) grad log phi")
    res = conformal_factor_residual(cm, bg, ctx)
    out = {
        "phi_minus_one_sup": sup,
        "log_phi_sup": float(np.abs(cm.log_phi).max()),
        "phi_minus_one_h_half": half.value,
        "grad_log_phi_h_half": grad.value,
        "conformal_factor_residual": res.value,
        "total_curvature": float(bg.angle_defect.sum()),
        "total_curvature_defect": float(abs(bg.angle_defect.sum() - 4.0 * np.pi)),
        "steps": cm.steps,
    }
    out.update(cm.quality)
    if eps_scale is not None and eps_scale > 0:
        for k in ("phi_minus_one_sup", "phi_minus_one_h_half", "grad_log_phi_h_half"):
            out[k + "_ratio"] = out[k] / eps_scale
    return out
