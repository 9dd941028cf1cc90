"""Lagrange finite elements on (chart, g): spaces, assembly, Dirichlet solves, fluxes.

Vector and tensor fields use chart components; a field with ``nc`` components
on a space with ``n`` scalar dofs is stored as ``(n, nc)`` and enters linear
systems component-major (global index ``c * n + i``).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import LinearOperator, cg, splu

from .errors import MeanValueError, QuadratureError, SolverError, TopologyError
from .mesh import TET_EDGES, TRI_EDGES, SurfaceMesh, TetMesh, tet_rule
from .metric import BoundaryGeometry, MetricField, christoffel_derivative, christoffel_from, curvature_from

CHUNK = 2048
FORMS = ("dirichlet-energy", "mass", "h1-energy", "connection-energy", "connection-h1",
         "tensor-h1", "surface-dirichlet-energy")


# ---------------------------------------------------------------- reference bases

def lagrange_basis(order, lam, edges):
    """Values and barycentric derivatives of P1/P2 Lagrange bases.

    ``lam`` has shape (Q, d+1). Returns ``phi`` (Q, nb) and ``dphi`` (Q, nb, d+1),
    vertex functions first, then one function per edge in ``edges`` order.
    """
    lam = np.asarray(lam, float)
    Q, nv = lam.shape
    if order == 1:
        return lam.copy(), np.broadcast_to(np.eye(nv), (Q, nv, nv)).copy()
    ne = len(edges)
    phi = np.empty((Q, nv + ne))
    dphi = np.zeros((Q, nv + ne, nv))
    phi[:, :nv] = lam * (2.0 * lam - 1.0)
    for a in range(nv):
        dphi[:, a, a] = 4.0 * lam[:, a] - 1.0
    for k, (i, j) in enumerate(edges):
        phi[:, nv + k] = 4.0 * lam[:, i] * lam[:, j]
        dphi[:, nv + k, i] = 4.0 * lam[:, j]
        dphi[:, nv + k, j] = 4.0 * lam[:, i]
    return phi, dphi


def lagrange_hessian(order, nv, edges):
    """Constant second barycentric derivatives, shape (nb, nv, nv)."""
    if order == 1:
        return np.zeros((nv, nv, nv))
    H = np.zeros((nv + len(edges), nv, nv))
    for a in range(nv):
        H[a, a, a] = 4.0
    for k, (i, j) in enumerate(edges):
        H[nv + k, i, j] = H[nv + k, j, i] = 4.0
    return H


def _edge_lookup(mesh: TetMesh, pairs):
    """Global edge index of each (sorted or not) vertex pair."""
    nv = mesh.n_vertices
    pairs = np.sort(np.asarray(pairs, np.int64), axis=-1)
    keys = mesh.edges[:, 0] * nv + mesh.edges[:, 1]
    q = pairs[..., 0] * nv + pairs[..., 1]
    idx = np.searchsorted(keys, q)
    if np.any(keys[np.minimum(idx, len(keys) - 1)] != q):
        raise TopologyError("edge not found in mesh")
    return idx


# ---------------------------------------------------------------- spaces

@dataclass(eq=False)
class FemSpace:
    """Scalar Lagrange space of order 1 or 2 on a tet mesh."""

    mesh: TetMesh
    order: int = 2

    def __post_init__(self):
        if self.order not in (1, 2):
            raise ValueError("order must be 1 or 2")
        m = self.mesh
        nv = m.n_vertices
        if self.order == 1:
            self.cell_dofs = np.asarray(m.tets)
            self.n_dofs = nv
        else:
            self.cell_dofs = np.hstack([m.tets, nv + m.tet_edges])
            self.n_dofs = nv + len(m.edges)
        s = m.boundary
        tri_glob = s.vertex_ids[s.triangles]
        if self.order == 1:
            self.trace_dofs = tri_glob
        else:
            sedge_glob = _edge_lookup(m, s.vertex_ids[s.edges])
            self.trace_dofs = np.hstack([tri_glob, nv + sedge_glob[s.tri_edges]])
        self.boundary_dofs = np.unique(self.trace_dofs)
        self.boundary_pos = np.full(self.n_dofs, -1, np.int64)
        self.boundary_pos[self.boundary_dofs] = np.arange(len(self.boundary_dofs))
        self.interior_dofs = np.setdiff1d(np.arange(self.n_dofs), self.boundary_dofs)

    @property
    def n_local(self):
        return self.cell_dofs.shape[1]

    def nodes(self):
        """Chart positions of the dofs (vertices, then edge midpoints)."""
        m = self.mesh
        if self.order == 1:
            return np.asarray(m.vertices)
        mid = 0.5 * (m.vertices[m.edges[:, 0]] + m.vertices[m.edges[:, 1]])
        return np.vstack([m.vertices, mid])

    def from_vertices(self, values):
        """Interpolate vertex data (nv, ...) into the space, edges by averaging endpoints."""
        values = np.asarray(values, float)
        if self.order == 1:
            return values.copy()
        e = self.mesh.edges
        return np.concatenate([values, 0.5 * (values[e[:, 0]] + values[e[:, 1]])])

    def interpolate(self, fn):
        """Nodal interpolant of a function of chart points."""
        return np.asarray(fn(self.nodes()), float)

    def basis(self, lam):
        return lagrange_basis(self.order, lam, TET_EDGES)

    def trace_basis(self, lam):
        return lagrange_basis(self.order, lam, TRI_EDGES)

    def basis_hessian(self):
        return lagrange_hessian(self.order, 4, TET_EDGES)

    def pattern(self):
        if getattr(self, "_pattern", None) is None:
            self._pattern = _make_pattern(self.cell_dofs, self.n_dofs)
        return self._pattern


def _grad_lambda(mesh: TetMesh, tets=None):
    """Chart gradients of barycentric coordinates, (nt, 4, 3)."""
    t = mesh.tets if tets is None else tets
    p = mesh.vertices[t]
    E = np.stack([p[:, 1] - p[:, 0], p[:, 2] - p[:, 0], p[:, 3] - p[:, 0]], axis=2)
    inv = np.linalg.inv(E)  # rows are grad lambda_1..3
    return np.concatenate([-inv.sum(axis=1, keepdims=True), inv], axis=1)


# ---------------------------------------------------------------- volume quadrature

@dataclass(eq=False)
class VolumeQuadrature:
    """Metric data at the quadrature points of every tet.

    ``w`` are Riemannian volume weights, so ``(w * f).sum()`` integrates f.
    """

    mesh: TetMesh
    metric: MetricField
    degree: int = 5
    _cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self.rule = tet_rule(self.degree)
        m = self.mesh
        p = m.vertices[m.tets]
        self.x = np.einsum("qa,tai->tqi", self.rule.points, p)
        g, dg, _ = self.metric.evaluate(self.x, order=1)
        self.g = g
        self.ginv = np.linalg.inv(g)
        self.sqrtg = np.sqrt(np.linalg.det(g))
        self.w = 6.0 * m.volumes[:, None] * self.rule.weights[None, :] * self.sqrtg
        self.gamma = christoffel_from(g, dg, self.ginv)
        self.grad_lambda = _grad_lambda(m)

    @property
    def n_points(self):
        return self.w.size

    @property
    def volume(self):
        return float(self.w.sum())

    def integrate(self, f):
        return float(np.einsum("tq,tq->", self.w, f))

    def chunks(self, size=CHUNK):
        n = self.mesh.n_tets
        for s in range(0, n, size):
            yield slice(s, min(s + size, n))

    def curvature(self):
        """Ricci, scalar, Einstein and |Rm|^2 at all points, computed in chunks."""
        if "curv" not in self._cache:
            nt, Q = self.w.shape
            out = {k: np.empty((nt, Q) + s) for k, s in
                   (("ricci", (3, 3)), ("einstein", (3, 3)), ("scalar", ()), ("riemann2", ()))}
            from .metric import riemann_norm2
            for sl in self.chunks():
                g, dg, d2g = self.metric.evaluate(self.x[sl], order=2, check=False)
                c = curvature_from(g, dg, d2g, self.ginv[sl])
                out["ricci"][sl] = c.ricci
                out["einstein"][sl] = c.einstein
                out["scalar"][sl] = c.scalar
                out["riemann2"][sl] = riemann_norm2(c.riemann, self.ginv[sl])
            self._cache["curv"] = out
        return self._cache["curv"]

    def dgamma(self, sl):
        g, dg, d2g = self.metric.evaluate(self.x[sl], order=2, check=False)
        return christoffel_derivative(g, dg, d2g, self.ginv[sl])


# ---------------------------------------------------------------- fields

@dataclass(eq=False)
class DiscreteField:
    """Coefficients on a FemSpace; ``coef`` is (n,) for scalars, (n, nc) otherwise."""

    space: FemSpace
    coef: np.ndarray
    rank: str = "scalar"
    info: dict = field(default_factory=dict)

    def __post_init__(self):
        self.coef = np.asarray(self.coef, float)
        if self.coef.shape[0] != self.space.n_dofs:
            raise ValueError(f"coefficient length {self.coef.shape[0]} != {self.space.n_dofs} dofs")

    @property
    def ncomp(self):
        return 1 if self.coef.ndim == 1 else self.coef.shape[1]

    def _local(self, sl=slice(None)):
        return self.coef[self.space.cell_dofs[sl]]  # (nt, nb, ...)

    def values(self, quad: VolumeQuadrature, sl=slice(None)):
        phi, _ = self.space.basis(quad.rule.points)
        return np.einsum("qa,ta...->tq...", phi, self._local(sl))

    def grads(self, quad: VolumeQuadrature, sl=slice(None)):
        """Chart partials, shape (nt, Q, [nc,] 3)."""
        _, dphi = self.space.basis(quad.rule.points)
        loc = self._local(sl)
        t, nb, tail = loc.shape[0], loc.shape[1], loc.shape[2:]
        Q = dphi.shape[0]
        L = loc.reshape(t, nb, -1).transpose(0, 2, 1)                        # (t, m, nb)
        dl = np.matmul(L, dphi.transpose(1, 0, 2).reshape(nb, Q * 4))       # (t, m, Q*4)
        out = np.matmul(dl.reshape(t, -1, Q, 4), quad.grad_lambda[sl][:, None])  # (t, m, Q, 3)
        return np.moveaxis(out, 2, 1).reshape((t, Q) + tail + (3,))

    def second_partials(self, quad: VolumeQuadrature, sl=slice(None)):
        """Chart second partials (constant per tet), shape (nt, [nc,] 3, 3)."""
        H = self.space.basis_hessian()
        gl = quad.grad_lambda[sl]
        d2 = np.einsum("akl,ta...->t...kl", H, self._local(sl))
        return np.einsum("t...kl,tki,tlj->t...ij", d2, gl, gl)

    def covariant_hessian(self, quad: VolumeQuadrature, sl=slice(None)):
        """nabla_i nabla_j u = d_i d_j u - Gamma^k_ij d_k u, per scalar component.

        Shape (nt, Q, 3, 3), or (nt, Q, nc, 3, 3) for multi-component coefficients.
        """
        d2 = self.second_partials(quad, sl)
        du = self.grads(quad, sl)
        gam = quad.gamma[sl]
        if self.ncomp == 1:
            return d2[:, None] - np.einsum("tqkij,tqk->tqij", gam, du)
        return d2[:, None] - np.einsum("tqkij,tqak->tqaij", gam, du)

    def vertex_values(self):
        return self.coef[: self.space.mesh.n_vertices]


# ---------------------------------------------------------------- assembly

@dataclass(eq=False)
class AssembledForm:
    """Sparse symmetric matrix of a bilinear form plus its fibre mass."""

    space: FemSpace
    kind: str
    matrix: sp.csr_matrix
    mass: sp.csr_matrix | None
    ncomp: int
    quad: VolumeQuadrature | None = None

    @property
    def n(self):
        return self.matrix.shape[0]

    def global_index(self, dofs):
        """Component-major system indices of scalar dof indices, (nc * len(dofs),)."""
        n = self.space.n_dofs
        return np.concatenate([c * n + np.asarray(dofs) for c in range(self.ncomp)])

    def flatten(self, coef):
        coef = np.asarray(coef, float)
        return coef.reshape(-1) if coef.ndim == 1 else coef.T.reshape(-1)

    def unflatten(self, vec):
        if self.ncomp == 1:
            return vec
        return vec.reshape(self.ncomp, -1).T

    def energy(self, coef):
        v = self.flatten(coef)
        return float(v @ (self.matrix @ v))


def _connection(kind, quad, sl):
    """Connection coefficients C[i, I, K] and fibre metric G[I, J] for a tensor kind."""
    gam = quad.gamma[sl]
    g, ginv = quad.g[sl], quad.ginv[sl]
    if kind == "vector":
        # nabla_i X^m = d_i X^m + Gamma^m_il X^l
        C = np.einsum("...mil->...iml", gam)
        return C, g
    if kind == "covector":
        # nabla_i w_m = d_i w_m - Gamma^l_im w_l
        C = -np.einsum("...lim->...iml", gam)
        return C, ginv
    if kind == "tensor2":
        # nabla_i T_ac = d_i T_ac - Gamma^e_ia T_ec - Gamma^f_ic T_af
        eye = np.eye(3)
        C = -(np.einsum("...eia,cf->...iacef", gam, eye) + np.einsum("...fic,ae->...iacef", gam, eye))
        C = C.reshape(C.shape[:-5] + (3, 9, 9))
        G = np.einsum("...ae,...cf->...acef", ginv, ginv).reshape(ginv.shape[:-2] + (9, 9))
        return C, G
    raise ValueError(kind)


def _coo_add(rows, cols, vals, n):
    return sp.coo_matrix((vals.ravel(), (rows.ravel(), cols.ravel())), shape=(n, n)).tocsr()


def _assemble_scalar(space, quad, stiff, mass):
    phi, dphi = space.basis(quad.rule.points)
    Q, nb = phi.shape
    pat = space.pattern()
    pp = np.einsum("qa,qb->qab", phi, phi).reshape(Q, nb * nb)
    accA = np.zeros((1, pat.nnz))
    accM = np.zeros((1, pat.nnz))
    for sl in quad.chunks():
        w = quad.w[sl]
        t = len(w)
        if stiff:
            grad = np.einsum("qak,tki->tqia", dphi, quad.grad_lambda[sl])
            P = np.matmul(np.swapaxes(grad, 2, 3), np.matmul(quad.ginv[sl], grad)).reshape(t, Q, nb * nb)
            accA += _scatter(pat, sl, np.matmul(w[:, None, :], P))
        if mass:
            accM += _scatter(pat, sl, (w @ pp)[:, None, :])
    return _from_pattern(pat, accA), _from_pattern(pat, accM)


@dataclass
class _Pattern:
    """CSR sparsity of the scalar element matrices and the map from local entries."""

    n: int
    indptr: np.ndarray
    indices: np.ndarray
    inv: np.ndarray  # (nt * nb * nb,) position of each local entry

    @property
    def nnz(self):
        return len(self.indices)


def _make_pattern(cell_dofs, n):
    nt, nb = cell_dofs.shape
    keys = (cell_dofs[:, :, None] * n + cell_dofs[:, None, :]).ravel()
    uniq, inv = np.unique(keys, return_inverse=True)
    rows = uniq // n
    indptr = np.concatenate([[0], np.cumsum(np.bincount(rows, minlength=n))])
    return _Pattern(n, indptr, (uniq % n).astype(np.int64), inv.ravel())


def _scatter(pat, sl, loc, nc=1, nb=None):
    """Accumulate element blocks loc (t, nc*nc, nb*nb) into pattern data (nc*nc, nnz)."""
    t = loc.shape[0]
    nb2 = loc.shape[-1]
    idx = pat.inv[sl.start * nb2:(sl.start + t) * nb2]
    out = np.empty((nc * nc, pat.nnz))
    for k in range(nc * nc):
        out[k] = np.bincount(idx, weights=loc[:, k].ravel(), minlength=pat.nnz)
    return out


def _from_pattern(pat, data, nc=1):
    blocks = [[sp.csr_matrix((data[K * nc + L], pat.indices, pat.indptr), shape=(pat.n, pat.n))
               for L in range(nc)] for K in range(nc)]
    return blocks[0][0] if nc == 1 else sp.bmat(blocks, format="csr")


def _block_transpose(X, nc, nb):
    """Swap (K, a) with (L, b) in blocks stored as (t, K*nc+L, a*nb+b)."""
    t = X.shape[0]
    return X.reshape(t, nc, nc, nb, nb).transpose(0, 2, 1, 4, 3).reshape(t, nc * nc, nb * nb)


def _qsum(A, B):
    """sum_q A[t, q, m] B[t, q, n] as a batched matrix product, (t, m, n)."""
    return np.matmul(np.swapaxes(A, 1, 2), B)


def _assemble_tensor(space, quad, tkind, stiff=True, mass=True):
    n = space.n_dofs
    nc = {"vector": 3, "covector": 3, "tensor2": 9}[tkind]
    phi, dphi = space.basis(quad.rule.points)
    nb = phi.shape[1]
    Q = len(phi)
    pp = np.einsum("qa,qb->qab", phi, phi).reshape(Q, nb * nb)
    pat = space.pattern()
    accA = np.zeros((nc * nc, pat.nnz))
    accM = np.zeros((nc * nc, pat.nnz))
    for sl in quad.chunks(max(64, CHUNK * 10 // (nc * nb))):
        t = sl.stop - sl.start
        w = quad.w[sl]
        C, G = _connection(tkind, quad, sl)
        wg = (w[..., None, None] * G).reshape(t, Q, nc * nc)
        if stiff:
            # block form of g^ij G_PQ (d_i T + C_i T)_P (d_j T + C_j T)_Q
            grad = np.einsum("qak,tki->tqia", dphi, quad.grad_lambda[sl])
            ginv = quad.ginv[sl]
            P = np.matmul(np.swapaxes(grad, 2, 3), np.matmul(ginv, grad)).reshape(t, Q, nb * nb)
            GC = np.matmul(wg.reshape(t, Q, 1, nc, nc), C)                   # (t,Q,j,K,L)
            H = np.matmul(ginv, GC.reshape(t, Q, 3, nc * nc)).reshape(GC.shape)   # g^ij GC_j
            Z = np.matmul(np.swapaxes(C, -1, -2), H).sum(2).reshape(t, Q, nc * nc)
            Y = np.einsum("tqia,qb->tqiab", grad, phi).reshape(t, Q * 3, nb * nb)
            X = _qsum(H.reshape(t, Q * 3, nc * nc), Y)
            loc = _qsum(wg, P) + X + _block_transpose(X, nc, nb) + _qsum(Z, np.broadcast_to(pp, (t, Q, nb * nb)))
            accA += _scatter(pat, sl, loc, nc, nb)
        if mass:
            accM += _scatter(pat, sl, _qsum(wg, np.broadcast_to(pp, (t, Q, nb * nb))), nc, nb)
    return _from_pattern(pat, accA, nc), _from_pattern(pat, accM, nc)


def _symmetrize(A):
    A = (A + A.T) * 0.5
    A.sum_duplicates()
    return A.tocsr()


def assemble(space: FemSpace, metric: MetricField, kind: str, quad: VolumeQuadrature | None = None,
             degree: int = 5, tensor: str = "vector") -> AssembledForm:
    """Assemble a bilinear form.

    Scalar kinds: ``dirichlet-energy``, ``mass``, ``h1-energy``. Vector kinds
    ``connection-energy`` and ``connection-h1`` use upper chart components;
    ``tensor-h1`` takes ``tensor`` in {vector, covector, tensor2}.
    """
    if kind not in FORMS or kind == "surface-dirichlet-energy":
        raise ValueError(f"unknown volume form {kind!r}")
    if degree < 2 * space.order:
        raise QuadratureError(f"quadrature degree {degree} < 2 * order {space.order}")
    if quad is None:
        quad = VolumeQuadrature(space.mesh, metric, degree)
    elif quad.rule.degree < 2 * space.order:
        raise QuadratureError("quadrature degree too low for this space")
    if kind in ("dirichlet-energy", "mass", "h1-energy"):
        K, M = _assemble_scalar(space, quad, kind != "mass", kind != "dirichlet-energy")
        mat = {"dirichlet-energy": K, "mass": M, "h1-energy": K + M}[kind]
        return AssembledForm(space, kind, _symmetrize(mat), _symmetrize(M) if kind != "dirichlet-energy" else None, 1, quad)
    tkind = "vector" if kind.startswith("connection") else tensor
    with_mass = kind != "connection-energy"
    K, M = _assemble_tensor(space, quad, tkind, stiff=True, mass=True)
    mat = K + M if with_mass else K
    nc = {"vector": 3, "covector": 3, "tensor2": 9}[tkind]
    return AssembledForm(space, kind, _symmetrize(mat), _symmetrize(M), nc, quad)


def scalar_mass(space: FemSpace, quad: VolumeQuadrature):
    _, M = _assemble_scalar(space, quad, False, True)
    return _symmetrize(M)


# ---------------------------------------------------------------- solves

@dataclass
class SolveInfo:
    iterations: int
    residual: float


def pcg(A, b, tol=1e-10, maxiter=None, x0=None):
    """Jacobi-preconditioned conjugate gradients; returns (x, SolveInfo)."""
    n = A.shape[0]
    if maxiter is None:
        maxiter = int(20 * np.sqrt(max(n, 1)))
    bnorm = np.linalg.norm(b)
    if bnorm == 0.0:
        return np.zeros(n), SolveInfo(0, 0.0)
    d = A.diagonal()
    if np.any(d <= 0):
        raise SolverError("matrix has non-positive diagonal entries", residual=np.inf, iterations=0)
    P = LinearOperator((n, n), matvec=lambda v: v / d, dtype=float)
    count = [0]

    def cb(_):
        count[0] += 1

    x, status = cg(A, b, x0=x0, rtol=tol, atol=0.0, maxiter=maxiter, M=P, callback=cb)
    res = float(np.linalg.norm(b - A @ x) / bnorm)
    if status != 0 or not np.isfinite(res):
        raise SolverError(f"conjugate gradients did not reach {tol:g} in {maxiter} iterations (residual {res:.3g})",
                          residual=res, iterations=count[0])
    return x, SolveInfo(count[0], res)


def solve_dirichlet(form: AssembledForm, boundary_values, load=None, tol=1e-10, maxiter=None) -> DiscreteField:
    """Minimize the form with prescribed boundary dofs.

    ``boundary_values`` is (nB,) or (nB, nc) ordered as ``space.boundary_dofs``.
    ``load`` holds dof values of a source s with -Delta u = s, paired through the mass.
    """
    space = form.space
    nc = form.ncomp
    bv = np.asarray(boundary_values, float).reshape(len(space.boundary_dofs), -1)
    if bv.shape[1] != nc:
        raise ValueError(f"boundary data has {bv.shape[1]} components, form has {nc}")
    bidx = form.global_index(space.boundary_dofs)
    iidx = form.global_index(space.interior_dofs)
    x = np.zeros(form.n)
    x[bidx] = bv.T.reshape(-1)
    rhs = -(form.matrix @ x)
    if load is not None:
        rhs = rhs + _mass_for(form) @ form.flatten(load)
    A_ii = form.matrix[iidx][:, iidx]
    xi, info = pcg(A_ii, rhs[iidx], tol=tol, maxiter=maxiter)
    x[iidx] = xi
    rank = "scalar" if nc == 1 else ("vector" if nc == 3 else "tensor")
    return DiscreteField(space, form.unflatten(x), rank,
                         info={"iterations": info.iterations, "residual": info.residual, "form": form.kind})


def _mass_for(form):
    if form.mass is None:
        form.mass = scalar_mass(form.space, form.quad)
    return form.mass


def residual_vector(form: AssembledForm, u: DiscreteField, load=None):
    """A u - M s on all dofs (system ordering)."""
    x = form.flatten(u.coef)
    r = form.matrix @ x
    if load is not None:
        r = r - _mass_for(form) @ form.flatten(load)
    return r


# ---------------------------------------------------------------- boundary trace space

@dataclass(eq=False)
class TraceSpace:
    """Traces of a FemSpace on the boundary, with quadrature from a BoundaryGeometry.

    Boundary vectors are indexed by position in ``space.boundary_dofs``.
    """

    space: FemSpace
    bg: BoundaryGeometry

    def __post_init__(self):
        self.dofs = self.space.boundary_pos[self.space.trace_dofs]  # (F, nbs)
        self.phi, dl = self.space.trace_basis(self.bg.bary)
        # frame derivatives d/ds_a with lambda_1 = s_1, lambda_2 = s_2
        self.dphi = np.stack([dl[..., 1] - dl[..., 0], dl[..., 2] - dl[..., 0]], axis=-1)  # (Q, nbs, 2)
        nb = len(self.space.boundary_dofs)
        self.n = nb
        F, nbs = self.dofs.shape
        rows = np.repeat(self.dofs[:, :, None], nbs, axis=2)
        cols = np.swapaxes(rows, 1, 2)
        w = self.bg.weights
        Mloc = np.einsum("fq,qa,qb->fab", w, self.phi, self.phi)
        Sloc = np.einsum("fq,fqcd,qac,qbd->fab", w, self.bg.gb_inv, self.dphi, self.dphi)
        self.mass = _symmetrize(_coo_add(rows, cols, Mloc, nb))
        self.stiffness = _symmetrize(_coo_add(rows, cols, Sloc, nb))
        self._mass_lu = None

    def restrict(self, coef):
        return np.asarray(coef)[self.space.boundary_dofs]

    def from_surface_vertices(self, values):
        """Boundary vector from per-surface-vertex data, edge dofs by averaging."""
        values = np.asarray(values, float)
        full = np.zeros((self.space.n_dofs,) + values.shape[1:])
        s = self.space.mesh.boundary
        full[s.vertex_ids] = values
        if self.space.order == 2:
            nv = self.space.mesh.n_vertices
            e = self.space.mesh.edges
            eb = self.space.boundary_dofs[self.space.boundary_dofs >= nv] - nv
            full[nv + eb] = 0.5 * (full[e[eb, 0]] + full[e[eb, 1]])
        return full[self.space.boundary_dofs]

    def values(self, vec):
        """Values at boundary quadrature points, (F, Q, ...)."""
        return np.einsum("qa,fa...->fq...", self.phi, np.asarray(vec)[self.dofs])

    def frame_grads(self, vec):
        """Derivatives along the two triangle tangents, (F, Q, ..., 2)."""
        return np.einsum("qac,fa...->fq...c", self.dphi, np.asarray(vec)[self.dofs])

    def load(self, samples):
        """Vector of integrals of samples (F, Q) against each trace basis function."""
        loc = np.einsum("fq,fq,qa->fa", self.bg.weights, samples, self.phi)
        return np.bincount(self.dofs.ravel(), weights=loc.ravel(), minlength=self.n)

    def load_gradient(self, vec_grad):
        """Integrals of g-check(v, grad w) for frame-covector samples v (F, Q, 2)."""
        loc = np.einsum("fq,fqcd,fqc,qad->fa", self.bg.weights, self.bg.gb_inv, vec_grad, self.dphi)
        return np.bincount(self.dofs.ravel(), weights=loc.ravel(), minlength=self.n)

    def solve_mass(self, rhs):
        if self._mass_lu is None:
            self._mass_lu = splu(self.mass.tocsc())
        rhs = np.asarray(rhs, float)
        if rhs.ndim == 1:
            return self._mass_lu.solve(rhs)
        return np.column_stack([self._mass_lu.solve(rhs[:, c]) for c in range(rhs.shape[1])])

    def integrate(self, samples):
        return self.bg.integrate(samples)


def boundary_flux(form: AssembledForm, u: DiscreteField, trace: TraceSpace, load=None):
    """Variational flux: r_B = (A u - M s)_B and the field N(u) with M_b N = r_B.

    Returns ``(r_B, N)``; ``r_B`` pairs with boundary dofs, ``N`` is a boundary
    vector per component (nB,) or (nB, nc).
    """
    if u.space is not form.space:
        raise ValueError("field and form live on different spaces")
    r = residual_vector(form, u, load)
    n = form.space.n_dofs
    rb = np.column_stack([r[c * n + form.space.boundary_dofs] for c in range(form.ncomp)])
    N = trace.solve_mass(rb)
    if form.ncomp == 1:
        return rb[:, 0], N[:, 0]
    return rb, N


# ---------------------------------------------------------------- surface forms

@dataclass(eq=False)
class SurfaceForm:
    """P1 surface stiffness and mass of the induced metric."""

    surface: SurfaceMesh
    stiffness: sp.csr_matrix
    mass: sp.csr_matrix
    kind: str = "surface-dirichlet-energy"


def surface_p1_frame_grads(bg: BoundaryGeometry, values):
    """Frame derivatives of a P1 surface field, constant per triangle, (F, ..., 2)."""
    v = np.asarray(values)[bg.surface.triangles]
    return np.stack([v[:, 1] - v[:, 0], v[:, 2] - v[:, 0]], axis=-1)


def assemble_surface(surface: SurfaceMesh, bg: BoundaryGeometry) -> SurfaceForm:
    """Order-1 stiffness and mass on the boundary with the induced metric."""
    if np.any(bg.tri_areas <= 0):
        raise TopologyError("degenerate boundary triangle")
    phi = bg.bary
    dphi = np.array([[-1.0, -1.0], [1.0, 0.0], [0.0, 1.0]])
    w = bg.weights
    tri = surface.triangles
    rows = np.repeat(tri[:, :, None], 3, axis=2)
    cols = np.swapaxes(rows, 1, 2)
    Sloc = np.einsum("fq,fqcd,ac,bd->fab", w, bg.gb_inv, dphi, dphi)
    Mloc = np.einsum("fq,qa,qb->fab", w, phi, phi)
    nv = surface.n_vertices
    return SurfaceForm(surface, _symmetrize(_coo_add(rows, cols, Sloc, nv)), _symmetrize(_coo_add(rows, cols, Mloc, nv)))


def solve_surface_poisson(form: SurfaceForm, f):
    """Mean-zero v with Laplacian(v) = f, i.e. S v = -M f, for mean-zero P1 data f."""
    if form.surface.n_components != 1:
        raise TopologyError(f"boundary has {form.surface.n_components} components; need a connected boundary")
    f = np.asarray(f, float)
    m = np.asarray(form.mass.sum(axis=1)).ravel()
    l1 = float(m @ np.abs(f))
    if abs(float(m @ f)) > 1e-10 * max(l1, 1e-300):
        raise MeanValueError(f"source has non-zero mean {float(m @ f) / m.sum():.3g}")
    n = len(f)
    K = sp.bmat([[form.stiffness, sp.csr_matrix(m[:, None])], [sp.csr_matrix(m[None, :]), None]]).tocsc()
    rhs = np.concatenate([-(form.mass @ f), [0.0]])
    v = splu(K).solve(rhs)[:n]
    return v - (m @ v) / m.sum()
