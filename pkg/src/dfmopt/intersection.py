"""Interface meshes and cross-mesh overlap tables.

The interface mesh of a fracture is the tessellation induced by slicing the
tetrahedral mesh with the fracture plane, clipped to the fracture polygon
and fan-triangulated.  Overlap tables carry the intersection of every pair
of cells from two meshes on the same fracture, together with a degree-2
quadrature rule on each intersection.
"""
from __future__ import annotations

import math
from collections import defaultdict, deque
from dataclasses import dataclass

import numpy as np

from .errors import EmptyInterface
from .geometry import ConvexPolygon2D, Fracture, _area, _dedupe, clip_convex, clip_segment_params
from .mesh import TetMesh, TriMesh
from .quadrature import fan_triangles, gauss_segment, polygon_rule

# local vertex indices of the face opposite each tet vertex
_OPPOSITE = ((1, 2, 3), (0, 2, 3), (0, 1, 3), (0, 1, 2))


# ---------------------------------------------------------------------------
# Tet slicing
# ---------------------------------------------------------------------------


def _ccw_sort(pts: np.ndarray) -> np.ndarray:
    c = pts.mean(axis=0)
    ang = np.arctan2(pts[:, 1] - c[1], pts[:, 0] - c[0])
    return pts[np.argsort(ang, kind="stable")]


def _slice_points(xs: np.ndarray, d: np.ndarray, eps: float, allow_negative_face: bool = False):
    """3D points of the plane section of one tet (unordered), or ``None``."""
    on = np.abs(d) <= eps
    pos = d > eps
    neg = d < -eps
    if not on.any() and (not pos.any() or not neg.any()):
        return None
    n_on = int(on.sum())
    if n_on == 3:
        if pos.any() or allow_negative_face:
            return xs[on]
        return None
    pts = [xs[k] for k in np.flatnonzero(on)]
    for a in np.flatnonzero(neg):
        for b in np.flatnonzero(pos):
            t = d[a] / (d[a] - d[b])
            pts.append(xs[a] + t * (xs[b] - xs[a]))
    if len(pts) < 3:
        return None
    return np.array(pts)


def slice_tet_by_fracture(
    tet_vertices, fracture: Fracture, eps: float = 1e-9, allow_negative_face: bool = False
) -> ConvexPolygon2D | None:
    """Section of a tet by the fracture plane, clipped to the fracture.

    The result is expressed in the fracture's local frame.  A tet face lying
    in the plane is returned only by the tet on the positive side of the
    plane unless ``allow_negative_face`` is set.
    """
    xs = np.asarray(tet_vertices, dtype=float)
    d = fracture.signed_distance(xs)
    poly = _slice_polygon(xs, d, fracture, fracture.polygon.tolist(), eps, allow_negative_face)
    return ConvexPolygon2D(poly) if poly else None


def _slice_polygon(xs, d, fracture, frac_poly, eps, allow_negative_face=False) -> list:
    pts = _slice_points(xs, d, eps, allow_negative_face)
    if pts is None:
        return []
    loc = _ccw_sort(fracture.to_local(pts, eps=None))
    sl = _dedupe([tuple(p) for p in loc.tolist()], eps)
    if not sl:
        return []
    return clip_convex(sl, [tuple(p) for p in frac_poly], eps)


# ---------------------------------------------------------------------------
# Interface mesh
# ---------------------------------------------------------------------------


@dataclass(eq=False)
class InterfaceMesh:
    """Fan-triangulated plane section of a tet mesh on one fracture.

    ``triangles`` has shape (n, 3, 2) in the fracture's local frame;
    ``parent_tet[k]`` is the tet whose section produced triangle ``k`` and
    ``provenance[k]`` the index of that section in ``cells``.
    """

    fracture_index: int
    triangles: np.ndarray
    parent_tet: np.ndarray
    provenance: np.ndarray
    cells: list
    cell_tet: np.ndarray

    @property
    def n_triangles(self) -> int:
        return len(self.triangles)

    @property
    def areas(self) -> np.ndarray:
        t = self.triangles
        e1 = t[:, 1] - t[:, 0]
        e2 = t[:, 2] - t[:, 0]
        return 0.5 * (e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0])

    @property
    def total_area(self) -> float:
        return float(self.areas.sum())

    def triangle_set(self, decimals: int = 12) -> set:
        """Hashable description used to compare two constructions."""
        out = set()
        for tri, tet in zip(np.round(self.triangles, decimals), self.parent_tet):
            out.add((int(tet), tuple(map(tuple, tri.tolist()))))
        return out

    def as_trimesh(self) -> TriMesh:
        pts = self.triangles.reshape(-1, 2)
        key = np.round(pts, 12)
        uniq, inv = np.unique(key, axis=0, return_inverse=True)
        tris = inv.reshape(-1, 3)
        return TriMesh(uniq, tris, 0.0, self.fracture_index)


def _candidate_mask(tet_mesh: TetMesh, fracture: Fracture, dist: np.ndarray, eps: float) -> np.ndarray:
    dt = dist[tet_mesh.tets]
    mask = (dt.min(axis=1) <= eps) & (dt.max(axis=1) >= -eps)
    loc = fracture.to_local(tet_mesh.vertices, eps=None)[tet_mesh.tets]
    lo, hi = fracture.polygon.min(axis=0) - eps, fracture.polygon.max(axis=0) + eps
    mask &= np.all(loc.max(axis=1) >= lo, axis=1) & np.all(loc.min(axis=1) <= hi, axis=1)
    return mask


def _negative_face_allowed(tet_mesh: TetMesh, t: int, d: np.ndarray, eps: float) -> bool:
    off = np.flatnonzero(np.abs(d) > eps)
    if len(off) != 1:
        return False
    return tet_mesh.neighbors[t, off[0]] < 0


def _section(tet_mesh, fracture, frac_poly, dist, t, eps):
    ids = tet_mesh.tets[t]
    d = dist[ids]
    allow = _negative_face_allowed(tet_mesh, t, d, eps)
    return _slice_polygon(tet_mesh.vertices[ids], d, fracture, frac_poly, eps, allow)


def _touches(tet_mesh, fracture, frac_poly, dist, t, eps) -> bool:
    """Conservative test: the closed tet meets the closed fracture."""
    ids = tet_mesh.tets[t]
    d = dist[ids]
    if d.min() > eps or d.max() < -eps:
        return False
    xs = tet_mesh.vertices[ids]
    on = np.abs(d) <= eps
    pts = [xs[k] for k in np.flatnonzero(on)]
    for a in np.flatnonzero(d < -eps):
        for b in np.flatnonzero(d > eps):
            s = d[a] / (d[a] - d[b])
            pts.append(xs[a] + s * (xs[b] - xs[a]))
    loc = fracture.to_local(np.array(pts), eps=None)
    n = len(frac_poly)
    for k in range(n):
        x0, y0 = frac_poly[k]
        x1, y1 = frac_poly[(k + 1) % n]
        ex, ey = x1 - x0, y1 - y0
        ln = math.hypot(ex, ey)
        side = ((loc[:, 0] - x0) * -ey + (loc[:, 1] - y0) * ex) / ln
        if side.max() < -eps:
            return False
    return True


def _seed_tet(tet_mesh: TetMesh, fracture: Fracture, candidates: np.ndarray) -> int:
    c = fracture.from_local(fracture.polygon.mean(axis=0))
    bary = tet_mesh.barycentric(candidates, np.broadcast_to(c, (len(candidates), 3)))
    return int(candidates[np.argmax(bary.min(axis=1))])


def _walk(tet_mesh, fracture, frac_poly, dist, eps) -> dict:
    candidates = np.flatnonzero(_candidate_mask(tet_mesh, fracture, dist, eps))
    if len(candidates) == 0:
        return {}
    seed = _seed_tet(tet_mesh, fracture, candidates)
    seen = {seed}
    queue = deque([seed])
    out = {}
    while queue:
        t = queue.popleft()
        poly = _section(tet_mesh, fracture, frac_poly, dist, t, eps)
        if poly:
            out[t] = poly
        for nb in tet_mesh.neighbors[t]:
            nb = int(nb)
            if nb < 0 or nb in seen:
                continue
            seen.add(nb)
            if _touches(tet_mesh, fracture, frac_poly, dist, nb, eps):
                queue.append(nb)
    return out


def _brute_force(tet_mesh, fracture, frac_poly, dist, eps) -> dict:
    out = {}
    for t in np.flatnonzero(_candidate_mask(tet_mesh, fracture, dist, eps)):
        poly = _section(tet_mesh, fracture, frac_poly, dist, int(t), eps)
        if poly:
            out[int(t)] = poly
    return out


def build_interface_mesh(
    tet_mesh: TetMesh,
    fracture: Fracture,
    fracture_index: int = -1,
    eps: float = 1e-9,
    method: str = "walk",
) -> InterfaceMesh:
    """Slice ``tet_mesh`` by ``fracture`` and fan-triangulate the sections.

    ``method="walk"`` grows the section set through tet neighbours from the
    tet containing the fracture centroid; ``method="brute"`` scans all tets.
    """
    dist = fracture.signed_distance(tet_mesh.vertices)
    frac_poly = [tuple(p) for p in fracture.polygon.tolist()]
    if method == "walk":
        sections = _walk(tet_mesh, fracture, frac_poly, dist, eps)
    elif method == "brute":
        sections = _brute_force(tet_mesh, fracture, frac_poly, dist, eps)
    else:
        raise ValueError(f"unknown method {method!r}")
    if not sections:
        raise EmptyInterface(f"fracture {fracture.id} does not meet the tet mesh")
    tris, parent, prov, cells, cell_tet = [], [], [], [], []
    for c, t in enumerate(sorted(sections)):
        poly = sections[t]
        cells.append(ConvexPolygon2D(poly))
        cell_tet.append(t)
        for tri in fan_triangles(poly):
            if _area(tri) <= 0.0:
                continue
            tris.append(tri)
            parent.append(t)
            prov.append(c)
    return InterfaceMesh(
        fracture_index,
        np.array(tris, dtype=float).reshape(-1, 3, 2),
        np.array(parent, dtype=np.int64),
        np.array(prov, dtype=np.int64),
        cells,
        np.array(cell_tet, dtype=np.int64),
    )


# ---------------------------------------------------------------------------
# Overlap tables
# ---------------------------------------------------------------------------


class _GridHash:
    """Uniform-grid bucket index of 2D bounding boxes."""

    def __init__(self, lo: np.ndarray, hi: np.ndarray):
        size = float(np.max(hi - lo)) if len(lo) else 1.0
        self.h = size if size > 0 else 1.0
        self.buckets = defaultdict(list)
        i0 = np.floor(lo / self.h).astype(np.int64)
        i1 = np.floor(hi / self.h).astype(np.int64)
        for k in range(len(lo)):
            for ix in range(i0[k, 0], i1[k, 0] + 1):
                for iy in range(i0[k, 1], i1[k, 1] + 1):
                    self.buckets[(ix, iy)].append(k)

    def query(self, lo, hi) -> set:
        out = set()
        for ix in range(int(math.floor(lo[0] / self.h)), int(math.floor(hi[0] / self.h)) + 1):
            for iy in range(int(math.floor(lo[1] / self.h)), int(math.floor(hi[1] / self.h)) + 1):
                out.update(self.buckets.get((ix, iy), ()))
        return out


@dataclass(eq=False)
class OverlapTable:
    """Intersections of cell pairs with a quadrature rule on each.

    Quadrature data are flattened: point ``p`` belongs to pair
    ``q_pair[p]`` and has coordinates ``q_points[p]`` and weight
    ``q_weights[p]``.  For ``tri-seg`` tables ``regions`` holds the
    parameter interval along the segment of ``cell_b``.
    """

    kind: str
    pairs: np.ndarray
    regions: list
    q_pair: np.ndarray
    q_points: np.ndarray
    q_weights: np.ndarray

    @property
    def q_a(self) -> np.ndarray:
        return self.pairs[self.q_pair, 0] if len(self.pairs) else np.zeros(0, dtype=np.int64)

    @property
    def q_b(self) -> np.ndarray:
        return self.pairs[self.q_pair, 1] if len(self.pairs) else np.zeros(0, dtype=np.int64)

    def measure_per_a(self, n_a: int) -> np.ndarray:
        return np.bincount(self.q_a, weights=self.q_weights, minlength=n_a)

    def __len__(self):
        return len(self.pairs)


def _as_triangles(cells) -> np.ndarray:
    if isinstance(cells, TriMesh):
        return cells.corners
    if isinstance(cells, InterfaceMesh):
        return cells.triangles
    return np.asarray(cells, dtype=float)


def build_overlap_table(cells_a, cells_b, kind: str = "tri-tri", eps: float = 1e-9) -> OverlapTable:
    """Pairwise intersections of two cell sets in one local frame.

    ``cells_a`` are triangles (``TriMesh``, ``InterfaceMesh`` or an (n, 3, 2)
    array).  For ``kind="tri-tri"`` so are ``cells_b``; for ``"tri-seg"``
    ``cells_b`` is an (n, 2, 2) array of segments.
    """
    ta = _as_triangles(cells_a)
    if kind == "tri-tri":
        return _tri_tri(ta, _as_triangles(cells_b), eps)
    if kind == "tri-seg":
        return _tri_seg(ta, np.asarray(cells_b, dtype=float), eps)
    raise ValueError(f"unknown overlap kind {kind!r}")


def _empty_table(kind: str, dim: int) -> OverlapTable:
    shape = (0, 2) if dim == 2 else (0,)
    return OverlapTable(kind, np.zeros((0, 2), dtype=np.int64), [], np.zeros(0, dtype=np.int64), np.zeros(shape), np.zeros(0))


def _tri_tri(ta: np.ndarray, tb: np.ndarray, eps: float) -> OverlapTable:
    if len(ta) == 0 or len(tb) == 0:
        return _empty_table("tri-tri", 2)
    lo_b, hi_b = tb.min(axis=1), tb.max(axis=1)
    grid = _GridHash(lo_b, hi_b)
    lo_a, hi_a = ta.min(axis=1), ta.max(axis=1)
    la = ta.tolist()
    lb = tb.tolist()
    tiny = eps * eps
    pairs, regions, q_pair, pts, wts = [], [], [], [], []
    for a in range(len(ta)):
        A = [tuple(p) for p in la[a]]
        for b in sorted(grid.query(lo_a[a] - eps, hi_a[a] + eps)):
            if np.any(lo_b[b] > hi_a[a] + eps) or np.any(hi_b[b] < lo_a[a] - eps):
                continue
            poly = clip_convex(A, [tuple(p) for p in lb[b]], eps)
            if not poly or _area(poly) <= tiny:
                continue
            p, w = polygon_rule(poly)
            if not p:
                continue
            q_pair.extend([len(pairs)] * len(p))
            pairs.append((a, b))
            regions.append(poly)
            pts.extend(p)
            wts.extend(w)
    if not pairs:
        return _empty_table("tri-tri", 2)
    return OverlapTable(
        "tri-tri",
        np.array(pairs, dtype=np.int64),
        regions,
        np.array(q_pair, dtype=np.int64),
        np.array(pts, dtype=float),
        np.array(wts, dtype=float),
    )


def segment_partition(triangles: np.ndarray, a, b, eps: float = 1e-9, candidates=None):
    """Partition of segment a->b by a triangulation.

    Returns ``(tri, t0, t1)`` arrays of sub-intervals of [0, 1] and the
    triangle owning each; breakpoints shared by neighbouring triangles are
    merged, so every point of the covered part is counted once.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    length = float(np.linalg.norm(b - a))
    tri = np.asarray(triangles, dtype=float)
    if candidates is None:
        lo = np.minimum(a, b) - eps
        hi = np.maximum(a, b) + eps
        candidates = np.flatnonzero(np.all(tri.max(axis=1) >= lo, axis=1) & np.all(tri.min(axis=1) <= hi, axis=1))
    hits = []
    for k in candidates:
        poly = [tuple(p) for p in tri[k].tolist()]
        res = clip_segment_params(poly, a[0], a[1], b[0], b[1], eps)
        if res is not None:
            hits.append((int(k), max(res[0], 0.0), min(res[1], 1.0)))
    if not hits:
        return np.zeros(0, dtype=np.int64), np.zeros(0), np.zeros(0)
    tol = eps / max(length, eps)
    breaks = np.unique(np.array([h[1] for h in hits] + [h[2] for h in hits]))
    merged = [breaks[0]]
    for t in breaks[1:]:
        if t - merged[-1] > tol:
            merged.append(t)
        elif t == 1.0 and len(merged) > 1:
            merged[-1] = 1.0
    merged = np.array(merged)
    out_tri, out_t0, out_t1 = [], [], []
    for t0, t1 in zip(merged[:-1], merged[1:]):
        mid = 0.5 * (t0 + t1)
        owner = next((k for k, s0, s1 in hits if s0 <= mid <= s1), None)
        if owner is None:
            continue
        out_tri.append(owner)
        out_t0.append(t0)
        out_t1.append(t1)
    return np.array(out_tri, dtype=np.int64), np.array(out_t0), np.array(out_t1)


def _tri_seg(ta: np.ndarray, segs: np.ndarray, eps: float) -> OverlapTable:
    if len(ta) == 0 or len(segs) == 0:
        return _empty_table("tri-seg", 2)
    gx, gw = gauss_segment(2)
    lo_a, hi_a = ta.min(axis=1), ta.max(axis=1)
    grid = _GridHash(lo_a, hi_a)
    pairs, regions, q_pair, pts, wts = [], [], [], [], []
    for s, (a, b) in enumerate(segs):
        cand = sorted(grid.query(np.minimum(a, b) - eps, np.maximum(a, b) + eps))
        tri, t0, t1 = segment_partition(ta, a, b, eps, candidates=cand)
        length = float(np.linalg.norm(b - a))
        for k, s0, s1 in zip(tri, t0, t1):
            t = s0 + (s1 - s0) * gx
            q_pair.extend([len(pairs)] * len(t))
            pairs.append((int(k), s))
            regions.append((float(s0), float(s1)))
            pts.extend(a[None, :] + t[:, None] * (b - a)[None, :])
            wts.extend(length * (s1 - s0) * gw)
    if not pairs:
        return _empty_table("tri-seg", 2)
    return OverlapTable(
        "tri-seg",
        np.array(pairs, dtype=np.int64),
        regions,
        np.array(q_pair, dtype=np.int64),
        np.array(pts, dtype=float),
        np.array(wts, dtype=float),
    )
