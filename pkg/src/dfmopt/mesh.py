"""Independent mesh families and degree-of-freedom bookkeeping.

Four mesh kinds live side by side and are never required to conform:

* :class:`TetMesh` on the porous box (structured Kuhn split),
* :class:`TriMesh` on each fracture, once for the head and once for the
  matrix-fracture control variable,
* :class:`SegMesh` on each trace, separately for each of its two fractures.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np
import scipy.sparse as sp
from scipy.spatial import Delaunay

from .errors import InvalidGeometry, InvalidParameter
from .geometry import FACES, Dirichlet, Fracture, PorousDomain, Trace, polygon_area


def _divisions(length: float, delta: float) -> int:
    return max(1, math.ceil(length / delta - 1e-9))


def _pair_faces(faces: np.ndarray, nv: int):
    """Match identical sorted faces; returns (first, second, unmatched)."""
    s = np.sort(faces, axis=1).astype(np.int64)
    key = s[:, 0]
    for c in range(1, s.shape[1]):
        key = key * nv + s[:, c]
    order = np.argsort(key, kind="stable")
    ks = key[order]
    same = ks[1:] == ks[:-1]
    first = order[:-1][same]
    second = order[1:][same]
    paired = np.zeros(len(faces), dtype=bool)
    paired[first] = True
    paired[second] = True
    return first, second, np.flatnonzero(~paired)


# ---------------------------------------------------------------------------
# Tetrahedral mesh
# ---------------------------------------------------------------------------


@dataclass(eq=False)
class TetMesh:
    """Tetrahedral mesh with neighbours and tagged boundary faces.

    ``neighbors[t, k]`` is the tet across the face opposite local vertex
    ``k`` (``-1`` on the boundary).
    """

    vertices: np.ndarray
    tets: np.ndarray
    h_param: float
    neighbors: np.ndarray = None
    boundary_faces: np.ndarray = None
    boundary_face_tet: np.ndarray = None
    face_tags: np.ndarray = None

    def __post_init__(self):
        if self.neighbors is None:
            self._build_topology()

    def _build_topology(self):
        nt = len(self.tets)
        local = np.array([[1, 2, 3], [0, 2, 3], [0, 1, 3], [0, 1, 2]])
        faces = self.tets[:, local].reshape(-1, 3)
        first, second, lonely = _pair_faces(faces, len(self.vertices))
        nb = -np.ones(4 * nt, dtype=np.int64)
        nb[first] = second // 4
        nb[second] = first // 4
        self.neighbors = nb.reshape(nt, 4)
        self.boundary_faces = faces[lonely]
        self.boundary_face_tet = lonely // 4
        self.face_tags = np.array([""] * len(lonely), dtype=object)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_tets(self) -> int:
        return len(self.tets)

    @cached_property
    def volumes(self) -> np.ndarray:
        x = self.vertices[self.tets]
        m = x[:, 1:] - x[:, :1]
        return np.linalg.det(m) / 6.0

    @cached_property
    def inverse_maps(self) -> np.ndarray:
        """``inv(M)`` with rows of ``M`` the edge vectors from vertex 0."""
        x = self.vertices[self.tets]
        return np.linalg.inv(x[:, 1:] - x[:, :1])

    @cached_property
    def gradients(self) -> np.ndarray:
        """Gradients of the four barycentric functions, shape (nt, 4, 3)."""
        inv = self.inverse_maps
        g = np.empty((self.n_tets, 4, 3))
        g[:, 1:, :] = np.swapaxes(inv, 1, 2)
        g[:, 0, :] = -g[:, 1:, :].sum(axis=1)
        return g

    def barycentric(self, tet_ids, points) -> np.ndarray:
        tet_ids = np.asarray(tet_ids)
        x0 = self.vertices[self.tets[tet_ids, 0]]
        xi = np.einsum("nj,njk->nk", np.asarray(points) - x0, self.inverse_maps[tet_ids])
        return np.column_stack([1.0 - xi.sum(axis=1), xi])

    def tag_faces(self, domain: PorousDomain) -> None:
        tol = domain.eps
        coords = self.vertices[self.boundary_faces]
        tags = np.array([""] * len(coords), dtype=object)
        for axis in range(3):
            for side, bound in (("min", domain.box_min[axis]), ("max", domain.box_max[axis])):
                on = np.all(np.abs(coords[:, :, axis] - bound) <= tol, axis=1)
                tags[on] = "xyz"[axis] + side
        self.face_tags = tags


_KUHN = None


def _kuhn_tets() -> np.ndarray:
    global _KUHN
    if _KUHN is None:
        corners = np.array([[b & 1, (b >> 1) & 1, (b >> 2) & 1] for b in range(8)], float)
        tets = []
        for perm in itertools.permutations(range(3)):
            path = [0]
            bits = 0
            for ax in perm:
                bits |= 1 << ax
                path.append(bits)
            x = corners[path]
            if np.linalg.det(x[1:] - x[0]) < 0:
                path[1], path[2] = path[2], path[1]
            tets.append(path)
        _KUHN = np.array(tets)
    return _KUHN


def build_box_tet_mesh(domain: PorousDomain, delta: float, divisions=None) -> TetMesh:
    """Structured Kuhn tetrahedralisation of the domain box.

    Each axis gets ``ceil(edge / delta)`` cells unless ``divisions`` gives the
    three counts explicitly.  No alignment with fractures is attempted.
    """
    if not delta > 0:
        raise InvalidParameter("delta_D must be positive")
    ext = domain.box_max - domain.box_min
    if divisions is None:
        n = [_divisions(e, delta) for e in ext]
    else:
        n = [int(v) for v in divisions]
        if min(n) < 1:
            raise InvalidParameter("divisions must be positive")
    axes = [np.linspace(domain.box_min[a], domain.box_max[a], n[a] + 1) for a in range(3)]
    # x fastest
    Z, Y, X = np.meshgrid(axes[2], axes[1], axes[0], indexing="ij")
    vertices = np.column_stack([X.ravel(), Y.ravel(), Z.ravel()])
    nx1, ny1 = n[0] + 1, n[1] + 1
    i, j, k = np.meshgrid(np.arange(n[0]), np.arange(n[1]), np.arange(n[2]), indexing="ij")
    base = (i + nx1 * (j + ny1 * k)).transpose(2, 1, 0).ravel()
    offs = np.array([(b & 1) + nx1 * (((b >> 1) & 1) + ny1 * ((b >> 2) & 1)) for b in range(8)])
    corner_ids = base[:, None] + offs[None, :]
    tets = corner_ids[:, _kuhn_tets()].reshape(-1, 4)
    mesh = TetMesh(vertices, tets, float(delta))
    mesh.tag_faces(domain)
    return mesh


def dirichlet_mask_tet(mesh: TetMesh, domain: PorousDomain) -> np.ndarray:
    mask = np.zeros(mesh.n_vertices, dtype=bool)
    for name in FACES:
        if isinstance(domain.face_bc[name], Dirichlet):
            mask[mesh.boundary_faces[mesh.face_tags == name].ravel()] = True
    return mask


# ---------------------------------------------------------------------------
# Triangular meshes on fractures
# ---------------------------------------------------------------------------


@dataclass(eq=False)
class TriMesh:
    """Triangulation of a fracture in its local frame.

    ``edge_tags[e]`` is the index of the fracture polygon edge carrying
    boundary edge ``e`` (``-1`` if it could not be matched).
    """

    vertices: np.ndarray
    tris: np.ndarray
    h_param: float
    fracture_index: int = -1
    boundary_edges: np.ndarray = None
    edge_tags: np.ndarray = None
    neighbors: np.ndarray = None

    def __post_init__(self):
        if self.neighbors is None:
            self._build_topology()

    def _build_topology(self):
        nt = len(self.tris)
        local = np.array([[1, 2], [2, 0], [0, 1]])
        edges = self.tris[:, local].reshape(-1, 2)
        first, second, lonely = _pair_faces(edges, len(self.vertices))
        nb = -np.ones(3 * nt, dtype=np.int64)
        nb[first] = second // 3
        nb[second] = first // 3
        self.neighbors = nb.reshape(nt, 3)
        self.boundary_edges = edges[lonely]
        if self.edge_tags is None:
            self.edge_tags = -np.ones(len(lonely), dtype=np.int64)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_tris(self) -> int:
        return len(self.tris)

    @cached_property
    def corners(self) -> np.ndarray:
        return self.vertices[self.tris]

    @cached_property
    def areas(self) -> np.ndarray:
        x = self.corners
        e1 = x[:, 1] - x[:, 0]
        e2 = x[:, 2] - x[:, 0]
        return 0.5 * (e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0])

    @cached_property
    def inverse_maps(self) -> np.ndarray:
        x = self.corners
        return np.linalg.inv(x[:, 1:] - x[:, :1])

    @cached_property
    def gradients(self) -> np.ndarray:
        inv = self.inverse_maps
        g = np.empty((self.n_tris, 3, 2))
        g[:, 1:, :] = np.swapaxes(inv, 1, 2)
        g[:, 0, :] = -g[:, 1:, :].sum(axis=1)
        return g

    def barycentric(self, tri_ids, points) -> np.ndarray:
        tri_ids = np.asarray(tri_ids)
        x0 = self.vertices[self.tris[tri_ids, 0]]
        xi = np.einsum("nj,njk->nk", np.asarray(points) - x0, self.inverse_maps[tri_ids])
        return np.column_stack([1.0 - xi.sum(axis=1), xi])

    def min_angle_deg(self) -> float:
        x = self.corners
        worst = 180.0
        for k in range(3):
            a = x[:, (k + 1) % 3] - x[:, k]
            b = x[:, (k + 2) % 3] - x[:, k]
            cos = np.sum(a * b, axis=1) / (np.linalg.norm(a, axis=1) * np.linalg.norm(b, axis=1))
            worst = min(worst, float(np.degrees(np.arccos(np.clip(cos, -1, 1))).min()))
        return worst

    def tag_edges(self, polygon: np.ndarray, eps: float) -> None:
        poly = np.asarray(polygon, dtype=float)
        tags = -np.ones(len(self.boundary_edges), dtype=np.int64)
        p = self.vertices[self.boundary_edges]
        for k in range(len(poly)):
            a, b = poly[k], poly[(k + 1) % len(poly)]
            d = b - a
            ln = np.linalg.norm(d)
            nrm = np.array([-d[1], d[0]]) / ln
            dist = np.abs((p - a) @ nrm)
            s = (p - a) @ (d / ln)
            on = np.all(dist <= eps, axis=1) & np.all((s >= -eps) & (s <= ln + eps), axis=1)
            tags[on & (tags < 0)] = k
        self.edge_tags = tags


def _is_aligned_rectangle(poly: np.ndarray, eps: float) -> bool:
    lo, hi = poly.min(axis=0), poly.max(axis=0)
    box_area = float(np.prod(hi - lo))
    return len(poly) == 4 and abs(polygon_area(poly) - box_area) <= eps * float(np.sum(hi - lo))


def _structured_rectangle(lo, hi, delta):
    nx = _divisions(hi[0] - lo[0], delta)
    ny = _divisions(hi[1] - lo[1], delta)
    xs = np.linspace(lo[0], hi[0], nx + 1)
    ys = np.linspace(lo[1], hi[1], ny + 1)
    X, Y = np.meshgrid(xs, ys)
    verts = np.column_stack([X.ravel(), Y.ravel()])
    i, j = np.meshgrid(np.arange(nx), np.arange(ny))
    v00 = (j * (nx + 1) + i).ravel()
    v10, v01, v11 = v00 + 1, v00 + nx + 1, v00 + nx + 2
    tris = np.vstack([np.column_stack([v00, v10, v11]), np.column_stack([v00, v11, v01])])
    return verts, tris


def _delaunay_polygon(poly: np.ndarray, delta: float, eps: float):
    pts = []
    for k in range(len(poly)):
        a, b = poly[k], poly[(k + 1) % len(poly)]
        n = _divisions(np.linalg.norm(b - a), delta)
        for s in range(n):
            pts.append(a + (b - a) * (s / n))
    lo, hi = poly.min(axis=0), poly.max(axis=0)
    nx, ny = _divisions(hi[0] - lo[0], delta), _divisions(hi[1] - lo[1], delta)
    xs = np.linspace(lo[0], hi[0], nx + 1)[1:-1]
    ys = np.linspace(lo[1], hi[1], ny + 1)[1:-1]
    if len(xs) and len(ys):
        X, Y = np.meshgrid(xs, ys)
        cand = np.column_stack([X.ravel(), Y.ravel()])
        keep = np.ones(len(cand), dtype=bool)
        for k in range(len(poly)):
            a, b = poly[k], poly[(k + 1) % len(poly)]
            d = b - a
            nrm = np.array([-d[1], d[0]]) / np.linalg.norm(d)
            keep &= (cand - a) @ nrm > 0.4 * delta
        pts.extend(cand[keep])
    pts = np.array(pts)
    tri = Delaunay(pts)
    tris = tri.simplices.copy()
    x = pts[tris]
    e1, e2 = x[:, 1] - x[:, 0], x[:, 2] - x[:, 0]
    area = 0.5 * (e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0])
    flip = area < 0
    tris[flip] = tris[flip][:, [0, 2, 1]]
    tris = tris[np.abs(area) > eps * eps]
    return pts, tris


def build_fracture_tri_mesh(
    fracture: Fracture, delta: float, fracture_index: int = -1, eps: float = 1e-9
) -> TriMesh:
    """Triangulate a convex fracture polygon with target edge length ``delta``.

    Rectangles aligned with the local frame get a structured grid; other
    convex polygons a Delaunay triangulation of boundary and grid points.
    """
    if not delta > 0:
        raise InvalidParameter("fracture mesh size must be positive")
    poly = fracture.polygon
    if _is_aligned_rectangle(poly, eps):
        verts, tris = _structured_rectangle(poly.min(axis=0), poly.max(axis=0), delta)
    else:
        verts, tris = _delaunay_polygon(poly, delta, eps)
    mesh = TriMesh(verts, tris, float(delta), fracture_index)
    total = float(mesh.areas.sum())
    if abs(total - fracture.area) > 1e-10 * fracture.area:
        raise InvalidGeometry(f"fracture {fracture.id}: triangulation misses area")
    mesh.tag_edges(poly, max(eps, 1e-12 * np.ptp(poly)))
    return mesh


def dirichlet_mask_tri(mesh: TriMesh, fracture: Fracture) -> np.ndarray:
    mask = np.zeros(mesh.n_vertices, dtype=bool)
    for e, tag in enumerate(mesh.edge_tags):
        if tag >= 0 and isinstance(fracture.edge_bc[tag], Dirichlet):
            mask[mesh.boundary_edges[e]] = True
    return mask


# ---------------------------------------------------------------------------
# Trace meshes
# ---------------------------------------------------------------------------


@dataclass(eq=False)
class SegMesh:
    param_breaks: np.ndarray
    owner: tuple

    def __post_init__(self):
        b = np.asarray(self.param_breaks, dtype=float)
        if len(b) < 2 or b[0] != 0.0 or b[-1] != 1.0 or np.any(np.diff(b) <= 0):
            raise InvalidParameter("segment breaks must increase from 0 to 1")
        self.param_breaks = b

    @property
    def n_elements(self) -> int:
        return len(self.param_breaks) - 1


def build_trace_mesh(trace: Trace, fracture_id: int, delta: float) -> SegMesh:
    if fracture_id not in trace.fracture_pair:
        raise InvalidParameter(f"fracture {fracture_id} does not own trace {trace.id}")
    if not delta > 0:
        raise InvalidParameter("trace mesh size must be positive")
    n = _divisions(trace.length, delta)
    return SegMesh(np.linspace(0.0, 1.0, n + 1), (fracture_id, trace.id))


# ---------------------------------------------------------------------------
# Dof layout
# ---------------------------------------------------------------------------


@dataclass
class DofLayout:
    """Sizes and offsets of the ``h_D``, ``h_F``, ``q`` and ``u`` blocks.

    The ``u`` vector is ordered trace by trace; inside trace ``m`` the part
    of the lower-index fracture comes first.
    """

    n_hD: int
    n_hi: list
    n_qi: list
    n_uim: dict
    trace_pairs: list
    h_offsets: list = field(init=False)
    q_offsets: list = field(init=False)
    u_offsets: dict = field(init=False)

    def __post_init__(self):
        self.h_offsets = [0] + list(np.cumsum(self.n_hi))
        self.q_offsets = [0] + list(np.cumsum(self.n_qi))
        self.u_offsets = {}
        pos = 0
        for m, (i, j) in enumerate(self.trace_pairs):
            for k in (i, j):
                self.u_offsets[(k, m)] = pos
                pos += self.n_uim[(k, m)]
        self._n_u = pos

    @property
    def n_fractures(self) -> int:
        return len(self.n_hi)

    @property
    def n_hF(self) -> int:
        return int(sum(self.n_hi))

    @property
    def n_q(self) -> int:
        return int(sum(self.n_qi))

    @property
    def n_u(self) -> int:
        return self._n_u

    @property
    def n_h(self) -> int:
        return self.n_hF + self.n_hD

    @property
    def n_w(self) -> int:
        return self.n_q + self.n_u

    @property
    def n_total(self) -> int:
        return self.n_h + self.n_q + self.n_u

    def traces_of(self, i: int) -> list:
        return [m for m, pair in enumerate(self.trace_pairs) if i in pair]

    def n_ui(self, i: int) -> int:
        return int(sum(self.n_uim[(i, m)] for m in self.traces_of(i)))

    def n_ui_plus(self, i: int) -> int:
        return int(sum(self.n_uim[(k, m)] for m in self.traces_of(i) for k in self.trace_pairs[m]))

    def h_slice(self, i: int) -> slice:
        return slice(self.h_offsets[i], self.h_offsets[i + 1])

    def q_slice(self, i: int) -> slice:
        return slice(self.q_offsets[i], self.q_offsets[i + 1])

    def u_slice(self, i: int, m: int) -> slice:
        o = self.u_offsets[(i, m)]
        return slice(o, o + self.n_uim[(i, m)])

    def _selection(self, cols: list) -> sp.csr_matrix:
        n = len(cols)
        return sp.csr_matrix((np.ones(n), (np.arange(n), np.asarray(cols, dtype=np.int64))), shape=(n, self.n_u))

    def R(self, i: int) -> sp.csr_matrix:
        """Gather ``u_i`` (all trace unknowns owned by fracture ``i``)."""
        cols = []
        for m in self.traces_of(i):
            s = self.u_slice(i, m)
            cols.extend(range(s.start, s.stop))
        return self._selection(cols)

    def R_plus(self, i: int) -> sp.csr_matrix:
        """Gather ``u_i^+`` (both sides of every trace on fracture ``i``)."""
        cols = []
        for m in self.traces_of(i):
            for k in self.trace_pairs[m]:
                s = self.u_slice(k, m)
                cols.extend(range(s.start, s.stop))
        return self._selection(cols)


def build_dof_layout(
    n_hD: int, h_free: list, q_meshes: list, seg_meshes: dict, trace_pairs: list
) -> DofLayout:
    """Layout from free-node counts, control meshes and trace meshes.

    ``h_free[i]`` is the number of free head nodes on fracture ``i``;
    ``seg_meshes`` maps ``(i, m)`` to the :class:`SegMesh` of fracture ``i``
    on trace ``m``.
    """
    n_uim = {key: seg.n_elements for key, seg in seg_meshes.items()}
    return DofLayout(
        int(n_hD),
        [int(n) for n in h_free],
        [int(q.n_tris) for q in q_meshes],
        n_uim,
        [tuple(p) for p in trace_pairs],
    )


# ---------------------------------------------------------------------------
# Plain-text mesh format
# ---------------------------------------------------------------------------


def write_tetmesh(mesh: TetMesh, path, tags=None) -> None:
    tags = np.zeros(mesh.n_tets, dtype=int) if tags is None else np.asarray(tags)
    with open(path, "w") as fh:
        fh.write(f"tetmesh {mesh.n_vertices} {mesh.n_tets}\n")
        for x, y, z in mesh.vertices:
            fh.write(f"{float(x)!r} {float(y)!r} {float(z)!r}\n")
        for (a, b, c, d), tag in zip(mesh.tets, tags):
            fh.write(f"{a} {b} {c} {d} {tag}\n")


def write_trimesh(mesh: TriMesh, path, tags=None) -> None:
    tags = np.zeros(mesh.n_tris, dtype=int) if tags is None else np.asarray(tags)
    with open(path, "w") as fh:
        fh.write(f"trimesh {mesh.n_vertices} {mesh.n_tris}\n")
        for x, y in mesh.vertices:
            fh.write(f"{float(x)!r} {float(y)!r}\n")
        for (a, b, c), tag in zip(mesh.tris, tags):
            fh.write(f"{a} {b} {c} {tag}\n")


def _read_text_mesh(path, kind: str, dim: int, nodes_per_cell: int):
    lines = [ln.split() for ln in Path(path).read_text().splitlines() if ln.strip()]
    head = lines[0]
    if len(head) != 3 or head[0] != kind:
        raise InvalidGeometry(f"{path}: expected '{kind} <nv> <ncells>' header")
    nv, nc = int(head[1]), int(head[2])
    if len(lines) != 1 + nv + nc:
        raise InvalidGeometry(f"{path}: expected {nv + nc} body lines, found {len(lines) - 1}")
    verts = np.array([[float(v) for v in ln[:dim]] for ln in lines[1 : 1 + nv]])
    cells = np.array([[int(v) for v in ln[: nodes_per_cell + 1]] for ln in lines[1 + nv :]], dtype=np.int64)
    return verts, cells[:, :nodes_per_cell], cells[:, nodes_per_cell]


def read_tetmesh(path, domain: PorousDomain | None = None, h_param: float = 0.0):
    """Read a ``tetmesh`` file; returns ``(TetMesh, tags)``."""
    verts, tets, tags = _read_text_mesh(path, "tetmesh", 3, 4)
    mesh = TetMesh(verts, tets, h_param)
    if domain is not None:
        mesh.tag_faces(domain)
    return mesh, tags


def read_trimesh(path, fracture: Fracture | None = None, h_param: float = 0.0, eps: float = 1e-9):
    """Read a ``trimesh`` file; returns ``(TriMesh, tags)``."""
    verts, tris, tags = _read_text_mesh(path, "trimesh", 2, 3)
    mesh = TriMesh(verts, tris, h_param)
    if fracture is not None:
        mesh.tag_edges(fracture.polygon, eps)
    return mesh, tags
