"""Tetrahedral meshes of the chart domain, boundary extraction and quadrature."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import Delaunay
from scipy.special import roots_jacobi

from .errors import EmptyBoundaryError, MeshParseError, MeshTopologyError, ResolutionError

# local faces of a positively oriented tet, each oriented outward
TET_FACES = np.array([[1, 2, 3], [0, 3, 2], [0, 1, 3], [0, 2, 1]])
# local edges of a tet, in the order used for P2 edge dofs
TET_EDGES = np.array([[0, 1], [0, 2], [0, 3], [1, 2], [1, 3], [2, 3]])
# local edges of a triangle, in the order used for surface P2 dofs
TRI_EDGES = np.array([[0, 1], [1, 2], [0, 2]])

ELEMENT_BUDGET = 1_000_000
ICO_SCALE = 1.2


def _frozen(a, dtype):
    a = np.ascontiguousarray(a, dtype=dtype)
    a.setflags(write=False)
    return a


def signed_volumes(vertices, tets):
    p = vertices[tets]
    a, b, c = p[:, 1] - p[:, 0], p[:, 2] - p[:, 0], p[:, 3] - p[:, 0]
    return np.einsum("ij,ij->i", np.cross(a, b), c) / 6.0


@dataclass(frozen=True, eq=False)
class SurfaceMesh:
    """Oriented boundary triangulation.

    ``vertex_ids[k]`` is the parent-mesh index of surface vertex ``k``;
    ``triangles`` index surface vertices and are oriented outward.
    """

    vertices: np.ndarray
    triangles: np.ndarray
    vertex_ids: np.ndarray
    dual_areas: np.ndarray
    edges: np.ndarray
    tri_edges: np.ndarray
    euler_characteristic: int
    n_components: int

    @property
    def n_vertices(self):
        return len(self.vertices)

    @property
    def areas(self):
        p = self.vertices[self.triangles]
        return 0.5 * np.linalg.norm(np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]), axis=1)

    @property
    def normals(self):
        """Unit outward chart normals of the triangles."""
        p = self.vertices[self.triangles]
        n = np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0])
        return n / np.linalg.norm(n, axis=1)[:, None]


@dataclass(frozen=True, eq=False)
class TetMesh:
    """Tetrahedral mesh with positively oriented tets.

    Edges are unique sorted vertex pairs; ``tet_edges`` maps each tet's six
    local edges (``TET_EDGES`` order) to global edge indices.
    """

    vertices: np.ndarray
    tets: np.ndarray
    boundary_faces: np.ndarray
    boundary_tets: np.ndarray
    n_interior_faces: int
    edges: np.ndarray
    tet_edges: np.ndarray
    flipped: int = 0
    _cache: dict = field(default_factory=dict, repr=False)

    @property
    def n_vertices(self):
        return len(self.vertices)

    @property
    def n_tets(self):
        return len(self.tets)

    @property
    def volumes(self):
        return signed_volumes(self.vertices, self.tets)

    @property
    def edge_lengths(self):
        return np.linalg.norm(self.vertices[self.edges[:, 1]] - self.vertices[self.edges[:, 0]], axis=1)

    @property
    def h(self):
        """Maximum edge length."""
        return float(self.edge_lengths.max())

    @property
    def boundary(self) -> SurfaceMesh:
        if "boundary" not in self._cache:
            self._cache["boundary"] = extract_boundary(self)
        return self._cache["boundary"]


def build_mesh(vertices, tets, repair=True) -> TetMesh:
    """Validate connectivity, repair orientation and collect faces and edges."""
    vertices = np.asarray(vertices, dtype=float)
    tets = np.array(tets, dtype=np.int64).reshape(-1, 4)
    if vertices.ndim != 2 or vertices.shape[1] != 3:
        raise MeshParseError("vertices must be an (n, 3) array")
    if len(tets) == 0:
        raise MeshTopologyError("mesh has no tets")
    if tets.min() < 0 or tets.max() >= len(vertices):
        raise MeshParseError("tet vertex index out of range")
    if np.any(np.sort(tets, axis=1)[:, 1:] == np.sort(tets, axis=1)[:, :-1]):
        raise MeshTopologyError("tet with repeated vertex")
    vol = signed_volumes(vertices, tets)
    if np.any(vol == 0.0):
        raise MeshTopologyError(f"{int((vol == 0).sum())} degenerate tets")
    neg = vol < 0
    if neg.any() and not repair:
        raise MeshTopologyError(f"{int(neg.sum())} negatively oriented tets")
    tets[neg] = tets[neg][:, [0, 2, 1, 3]]

    faces = tets[:, TET_FACES].reshape(-1, 3)
    key = np.sort(faces, axis=1)
    _, inv, counts = np.unique(key, axis=0, return_inverse=True, return_counts=True)
    inv = inv.ravel()
    if counts.max() > 2:
        raise MeshTopologyError(f"{int((counts > 2).sum())} faces shared by more than two tets")
    on_bdry = counts[inv] == 1
    if not on_bdry.any():
        raise EmptyBoundaryError("mesh has an empty boundary")
    bfaces = faces[on_bdry]
    btets = np.nonzero(on_bdry)[0] // 4

    ekey = np.sort(tets[:, TET_EDGES].reshape(-1, 2), axis=1)
    edges, einv = np.unique(ekey, axis=0, return_inverse=True)
    return TetMesh(
        vertices=_frozen(vertices, float),
        tets=_frozen(tets, np.int64),
        boundary_faces=_frozen(bfaces, np.int64),
        boundary_tets=_frozen(btets, np.int64),
        n_interior_faces=int((counts == 2).sum()),
        edges=_frozen(edges, np.int64),
        tet_edges=_frozen(einv.reshape(-1, 6), np.int64),
        flipped=int(neg.sum()),
    )


def extract_boundary(mesh: TetMesh) -> SurfaceMesh:
    """Boundary triangulation with Euler characteristic and component count."""
    ids, local = np.unique(mesh.boundary_faces, return_inverse=True)
    tri = local.reshape(-1, 3)
    verts = np.asarray(mesh.vertices)[ids]

    half = tri[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2)
    ekey = np.sort(half, axis=1)
    edges, einv, ecount = np.unique(ekey, axis=0, return_inverse=True, return_counts=True)
    einv = einv.ravel()
    if np.any(ecount != 2):
        raise MeshTopologyError("boundary edge not shared by exactly two triangles")
    # consistent orientation: every directed edge occurs once
    if len(np.unique(half, axis=0)) != len(half):
        raise MeshTopologyError("boundary triangles are not consistently oriented")
    # surface edge numbering follows TRI_EDGES: (0,1), (1,2), (0,2)
    tri_edges = np.stack([einv[0::3], einv[1::3], einv[2::3]], axis=1)

    nv = len(ids)
    adj = coo_matrix((np.ones(len(edges)), (edges[:, 0], edges[:, 1])), shape=(nv, nv))
    ncomp, _ = connected_components(adj, directed=False)

    p = verts[tri]
    area = 0.5 * np.linalg.norm(np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]), axis=1)
    dual = np.bincount(tri.ravel(), weights=np.repeat(area / 3.0, 3), minlength=nv)
    chi = nv - len(edges) + len(tri)
    return SurfaceMesh(
        vertices=_frozen(verts, float),
        triangles=_frozen(tri, np.int64),
        vertex_ids=_frozen(ids, np.int64),
        dual_areas=_frozen(dual, float),
        edges=_frozen(edges, np.int64),
        tri_edges=_frozen(tri_edges, np.int64),
        euler_characteristic=int(chi),
        n_components=int(ncomp),
    )


# ---------------------------------------------------------------- generation

def icosphere(n):
    """Vertices of the frequency-n geodesic subdivision of the icosahedron, on S^2."""
    t = (1.0 + np.sqrt(5.0)) / 2.0
    V = np.array([[-1, t, 0], [1, t, 0], [-1, -t, 0], [1, -t, 0], [0, -1, t], [0, 1, t],
                  [0, -1, -t], [0, 1, -t], [t, 0, -1], [t, 0, 1], [-t, 0, -1], [-t, 0, 1]], float)
    V /= np.linalg.norm(V, axis=1)[:, None]
    F = np.array([[0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11], [1, 5, 9], [5, 11, 4],
                  [11, 10, 2], [10, 7, 6], [7, 1, 8], [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8],
                  [3, 8, 9], [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1]])
    i, j = np.meshgrid(np.arange(n + 1), np.arange(n + 1), indexing="ij")
    keep = i + j <= n
    w = np.column_stack([i[keep], j[keep], n - i[keep] - j[keep]]) / n
    p = np.einsum("ka,fai->fki", w, V[F]).reshape(-1, 3)
    p /= np.linalg.norm(p, axis=1)[:, None]
    _, first = np.unique(np.round(p, 9), axis=0, return_index=True)
    return p[np.sort(first)]


def _circumcenters(p):
    a, b, c = p[:, 1] - p[:, 0], p[:, 2] - p[:, 0], p[:, 3] - p[:, 0]
    A = np.stack([a, b, c], axis=1)
    rhs = 0.5 * np.stack([(a * a).sum(1), (b * b).sum(1), (c * c).sum(1)], axis=1)
    return p[:, 0] + np.linalg.solve(A, rhs[..., None])[..., 0]


def estimated_tets(h, radius=1.0):
    return int(10.8 * (4.0 / 3.0 * np.pi * radius**3) / h**3)


def generate_ball_mesh(h, radius=1.0, smoothing=8, budget=ELEMENT_BUDGET, seed=0) -> TetMesh:
    """Delaunay tetrahedralization of the ball of given radius.

    Surface nodes are a geodesic icosahedral grid, interior nodes a jittered
    body-centred cubic lattice relaxed by a few optimal-Delaunay smoothing
    sweeps. Boundary nodes lie on the sphere to rounding.
    """
    if not 0.0 < h < radius:
        raise ValueError(f"need 0 < h < radius, got h={h}")
    if estimated_tets(h, radius) > budget:
        raise ResolutionError(f"h={h} needs about {estimated_tets(h, radius)} tets, budget is {budget}")
    hr = h / radius
    surf = icosphere(max(1, int(np.ceil(ICO_SCALE / hr))))
    ns = len(surf)

    m = int(np.ceil(1.0 / hr)) + 1
    g = np.arange(-m, m + 1) * hr
    cube = np.stack(np.meshgrid(g, g, g, indexing="ij"), -1).reshape(-1, 3)
    lattice = np.vstack([cube, cube + 0.5 * hr])
    rng = np.random.default_rng(seed)
    lattice = lattice + rng.uniform(-1.0, 1.0, lattice.shape) * 0.02 * hr
    inner = 1.0 - 0.3 * hr
    lattice = lattice[np.linalg.norm(lattice, axis=1) < 1.0 - 0.5 * hr]
    if len(lattice) == 0:
        lattice = np.zeros((1, 3))

    pts = np.vstack([surf, lattice])
    for _ in range(smoothing):
        tets = Delaunay(pts).simplices
        p = pts[tets]
        vol = np.abs(signed_volumes(pts, tets))
        ok = vol > 1e-14 * hr**3
        cc = p.mean(axis=1)
        cc[ok] = _circumcenters(p[ok])
        num = np.zeros_like(pts)
        for k in range(4):
            np.add.at(num, tets[:, k], vol[:, None] * cc)
        den = np.bincount(tets.ravel(), weights=np.repeat(vol, 4), minlength=len(pts))
        new = num / den[:, None]
        r = np.linalg.norm(new, axis=1)
        new *= np.where(r > inner, inner / np.maximum(r, 1e-300), 1.0)[:, None]
        pts[ns:] = new[ns:]

    tets = Delaunay(pts).simplices
    # boundary nodes exactly on the sphere
    pts[:ns] /= np.linalg.norm(pts[:ns], axis=1)[:, None]
    return build_mesh(pts * radius, tets)


# ---------------------------------------------------------------- file io

def _strip(lines):
    for ln in lines:
        ln = ln.split("#", 1)[0].strip()
        if ln:
            yield ln


def _read_native(text):
    it = _strip(text.splitlines())
    try:
        head = next(it).split()
        if head != ["tetmesh", "1"]:
            raise MeshParseError(f"bad header {' '.join(head)!r}")
        kw, n = next(it).split()
        if kw != "vertices":
            raise MeshParseError("expected 'vertices N'")
        verts = [list(map(float, next(it).split())) for _ in range(int(n))]
        kw, m = next(it).split()
        if kw != "tets":
            raise MeshParseError("expected 'tets M'")
        tets = [list(map(int, next(it).split())) for _ in range(int(m))]
        bnd = None
        rest = list(it)
        if rest:
            kw, k = rest[0].split()
            if kw != "boundary" or len(rest) != int(k) + 1:
                raise MeshParseError("malformed boundary block")
            bnd = [list(map(int, ln.split())) for ln in rest[1:]]
    except StopIteration:
        raise MeshParseError("unexpected end of file") from None
    except ValueError as exc:
        raise MeshParseError(str(exc)) from None
    if any(len(v) != 3 for v in verts) or any(len(t) != 4 for t in tets):
        raise MeshParseError("wrong number of entries on a vertex or tet line")
    if bnd is not None and any(len(f) != 3 for f in bnd):
        raise MeshParseError("boundary faces need three indices")
    return np.array(verts, float).reshape(-1, 3), np.array(tets, np.int64).reshape(-1, 4), bnd


def _read_medit(text):
    toks = _strip(text.splitlines())
    words = " ".join(toks).split()
    verts = tets = None
    i = 0
    try:
        while i < len(words):
            w = words[i]
            if w == "Vertices":
                n = int(words[i + 1])
                a = np.array(words[i + 2:i + 2 + 4 * n], float).reshape(n, 4)
                verts = a[:, :3]
                i += 2 + 4 * n
            elif w == "Tetrahedra":
                n = int(words[i + 1])
                a = np.array(words[i + 2:i + 2 + 5 * n], np.int64).reshape(n, 5)
                tets = a[:, :4] - 1
                i += 2 + 5 * n
            elif w in ("Triangles", "Edges", "Corners", "Ridges"):
                per = {"Triangles": 4, "Edges": 3, "Corners": 1, "Ridges": 1}[w]
                i += 2 + per * int(words[i + 1])
            elif w in ("MeshVersionFormatted", "Dimension"):
                i += 2
            elif w == "End":
                break
            else:
                raise MeshParseError(f"unknown medit keyword {w!r}")
    except (ValueError, IndexError) as exc:
        raise MeshParseError(f"malformed medit file: {exc}") from None
    if verts is None or tets is None:
        raise MeshParseError("medit file lacks Vertices or Tetrahedra")
    return verts, tets, None


def load_mesh(path, format=None) -> TetMesh:
    """Read a native ``tetmesh 1`` or medit ``.mesh`` file."""
    path = Path(path)
    if format is None:
        format = "medit-mesh" if path.suffix == ".mesh" else "native-ascii"
    text = path.read_text(encoding="utf-8")
    if format == "native-ascii":
        verts, tets, bnd = _read_native(text)
    elif format == "medit-mesh":
        verts, tets, bnd = _read_medit(text)
    else:
        raise ValueError(f"unknown mesh format {format!r}")
    mesh = build_mesh(verts, tets)
    if bnd is not None:
        given = {tuple(sorted(f)) for f in bnd}
        found = {tuple(sorted(f)) for f in mesh.boundary_faces.tolist()}
        if given != found:
            raise MeshTopologyError("boundary block does not match the boundary of the tets")
    return mesh


def save_mesh(mesh: TetMesh, path, format="native-ascii"):
    path = Path(path)
    lines = []
    if format == "native-ascii":
        lines.append("tetmesh 1")
        lines.append(f"vertices {mesh.n_vertices}")
        lines += [f"{x!r} {y!r} {z!r}" for x, y, z in mesh.vertices.tolist()]
        lines.append(f"tets {mesh.n_tets}")
        lines += [" ".join(map(str, t)) for t in mesh.tets.tolist()]
        lines.append(f"boundary {len(mesh.boundary_faces)}")
        lines += [" ".join(map(str, f)) for f in mesh.boundary_faces.tolist()]
    elif format == "medit-mesh":
        lines += ["MeshVersionFormatted 2", "Dimension 3", "Vertices", str(mesh.n_vertices)]
        lines += [f"{x!r} {y!r} {z!r} 0" for x, y, z in mesh.vertices.tolist()]
        lines += ["Tetrahedra", str(mesh.n_tets)]
        lines += [" ".join(str(i + 1) for i in t) + " 0" for t in mesh.tets.tolist()]
        lines.append("End")
    else:
        raise ValueError(f"unknown mesh format {format!r}")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def mesh_summary(mesh: TetMesh) -> dict:
    s = mesh.boundary
    vol = mesh.volumes
    return {
        "vertices": mesh.n_vertices,
        "tets": mesh.n_tets,
        "boundary_faces": len(mesh.boundary_faces),
        "interior_faces": mesh.n_interior_faces,
        "flipped": mesh.flipped,
        "volume": float(vol.sum()),
        "min_tet_volume": float(vol.min()),
        "max_edge": mesh.h,
        "euler_characteristic": s.euler_characteristic,
        "boundary_components": s.n_components,
    }


# ---------------------------------------------------------------- quadrature

@dataclass(frozen=True, eq=False)
class QuadratureRule:
    """Barycentric points and positive weights on the reference simplex.

    Weights sum to the reference measure (1/6 for tets, 1/2 for triangles).
    """

    points: np.ndarray
    weights: np.ndarray
    degree: int

    @property
    def dim(self):
        return self.points.shape[1] - 1


def _jacobi01(n, alpha):
    x, w = roots_jacobi(n, alpha, 0.0)
    return (1.0 + x) / 2.0, w / 2.0 ** (alpha + 1)


def simplex_rule(dim, degree) -> QuadratureRule:
    """Collapsed Gauss-Jacobi product rule exact to the given degree."""
    n = max(1, (degree + 2) // 2)
    if dim == 3:
        (u, wu), (v, wv), (w, ww) = _jacobi01(n, 2.0), _jacobi01(n, 1.0), _jacobi01(n, 0.0)
        U, V, W = np.meshgrid(u, v, w, indexing="ij")
        wt = np.einsum("i,j,k->ijk", wu, wv, ww).ravel()
        x = U.ravel()
        y = ((1 - U) * V).ravel()
        z = ((1 - U) * (1 - V) * W).ravel()
        bary = np.column_stack([1 - x - y - z, x, y, z])
    elif dim == 2:
        (u, wu), (v, wv) = _jacobi01(n, 1.0), _jacobi01(n, 0.0)
        U, V = np.meshgrid(u, v, indexing="ij")
        wt = np.outer(wu, wv).ravel()
        x = U.ravel()
        y = ((1 - U) * V).ravel()
        bary = np.column_stack([1 - x - y, x, y])
    elif dim == 1:
        x, wt = np.polynomial.legendre.leggauss(n)
        x = (x + 1) / 2
        wt = wt / 2
        bary = np.column_stack([1 - x, x])
    else:
        raise ValueError("dim must be 1, 2 or 3")
    return QuadratureRule(_frozen(bary, float), _frozen(wt, float), 2 * n - 1)


# symmetric 14-point rule with positive weights, exact to degree 5
_T14_ORBITS = [(0.3108859192633006, 0.1126879257180159), (0.0927352503108912, 0.0734930431163619)]
_T14_EDGE = (0.0455037041256496, 0.0425460207770815)


def tet_rule(degree=5) -> QuadratureRule:
    """Tetrahedral rule: the 14-point degree-5 rule, or Gauss-Jacobi beyond."""
    if degree > 5:
        return simplex_rule(3, degree)
    pts, wts = [], []
    for s, w in _T14_ORBITS:
        for k in range(4):
            lam = [s] * 4
            lam[k] = 1.0 - 3.0 * s
            pts.append(lam)
            wts.append(w / 6.0)
    s, w = _T14_EDGE
    for i, j in TET_EDGES:
        lam = [s] * 4
        lam[i] = lam[j] = 0.5 - s
        pts.append(lam)
        wts.append(w / 6.0)
    return QuadratureRule(_frozen(pts, float), _frozen(wts, float), 5)
