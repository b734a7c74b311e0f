"""Fracture planes, local frames, traces and convex clipping kernels.

All predicates share one absolute tolerance ``eps``.  Network-level code
derives it from the embedding box as ``1e-9 * diameter``; the low-level
polygon routines take it as an argument.

Polygon kernels work on plain lists of ``(x, y)`` tuples because they run
in tight Python loops during overlap computations; the public wrappers
accept and return ``numpy`` arrays.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Sequence, Union

import numpy as np

from .errors import (
    AssumptionViolated,
    InvalidGeometry,
    NonSegmentIntersection,
    OffPlane,
)

EPS_REL = 1e-9
FACES = ("xmin", "xmax", "ymin", "ymax", "zmin", "zmax")

Value = Union[float, Callable[[np.ndarray], np.ndarray]]


@dataclass(frozen=True)
class Dirichlet:
    value: Value = 0.0


@dataclass(frozen=True)
class Neumann:
    """Prescribed co-normal flux ``K grad(h) . n`` (outward normal)."""

    value: Value = 0.0


BoundaryCondition = Union[Dirichlet, Neumann]


def evaluate_value(value: Value, points: np.ndarray) -> np.ndarray:
    """Evaluate a constant or callable datum at ``points`` of shape (N, 3)."""
    points = np.asarray(points, dtype=float)
    if callable(value):
        out = np.asarray(value(points), dtype=float)
        return np.broadcast_to(out, points.shape[:1]).copy()
    return np.full(points.shape[0], float(value))


def _as_tensor(K, dim: int) -> np.ndarray:
    K = np.asarray(K, dtype=float)
    if K.ndim == 0:
        return float(K) * np.eye(dim)
    return K


def check_spd(K: np.ndarray, name: str) -> None:
    mats = K.reshape(-1, K.shape[-2], K.shape[-1])
    if not np.allclose(mats, np.swapaxes(mats, 1, 2), rtol=1e-12, atol=0.0):
        raise InvalidGeometry(f"{name} is not symmetric")
    if np.any(np.linalg.eigvalsh(mats) <= 0.0):
        raise InvalidGeometry(f"{name} is not positive definite")


# ---------------------------------------------------------------------------
# Local frames and fractures
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Frame:
    origin: np.ndarray
    e1: np.ndarray
    e2: np.ndarray
    normal: np.ndarray

    @property
    def axes(self) -> np.ndarray:
        return np.vstack([self.e1, self.e2])


def newell_normal(vertices: np.ndarray) -> np.ndarray:
    v = np.asarray(vertices, dtype=float)
    w = np.roll(v, -1, axis=0)
    n = np.array(
        [
            np.sum((v[:, 1] - w[:, 1]) * (v[:, 2] + w[:, 2])),
            np.sum((v[:, 2] - w[:, 2]) * (v[:, 0] + w[:, 0])),
            np.sum((v[:, 0] - w[:, 0]) * (v[:, 1] + w[:, 1])),
        ]
    )
    norm = np.linalg.norm(n)
    if norm == 0.0:
        raise InvalidGeometry("degenerate polygon: zero normal")
    return n / norm


def frame_from_vertices(vertices: np.ndarray) -> Frame:
    v = np.asarray(vertices, dtype=float)
    normal = newell_normal(v)
    e1 = v[1] - v[0]
    e1 = e1 - np.dot(e1, normal) * normal
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(normal, e1)
    e2 /= np.linalg.norm(e2)
    return Frame(v[0].copy(), e1, e2, normal)


@dataclass(eq=False)
class Fracture:
    """Planar convex fracture with its local frame and data.

    ``edge_bc[k]`` applies to the edge from vertex ``k`` to ``k + 1``.
    ``source`` is a volumetric source on the fracture (zero by default).
    """

    id: int
    vertices3d: np.ndarray
    frame: Frame
    K: np.ndarray
    edge_bc: tuple
    source: Value = 0.0

    @classmethod
    def from_vertices(
        cls,
        id: int,
        vertices,
        K=1.0,
        edge_bc: Sequence[BoundaryCondition] | None = None,
        source: Value = 0.0,
        eps: float = EPS_REL,
    ) -> "Fracture":
        v = np.asarray(vertices, dtype=float)
        if v.ndim != 2 or v.shape[1] != 3 or len(v) < 3:
            raise InvalidGeometry("fracture needs at least three 3D vertices")
        frame = frame_from_vertices(v)
        if edge_bc is None:
            edge_bc = [Neumann(0.0)] * len(v)
        if len(edge_bc) != len(v):
            raise InvalidGeometry("one boundary condition per fracture edge")
        frac = cls(id, v, frame, _as_tensor(K, 2), tuple(edge_bc), source)
        frac.validate(eps)
        return frac

    def validate(self, eps: float = EPS_REL) -> None:
        f = self.frame
        axes = np.vstack([f.e1, f.e2, f.normal])
        if np.max(np.abs(axes @ axes.T - np.eye(3))) > 1e-12:
            raise InvalidGeometry("frame axes not orthonormal")
        dist = (self.vertices3d - f.origin) @ f.normal
        if np.max(np.abs(dist)) > eps:
            raise InvalidGeometry(f"fracture {self.id}: vertices not coplanar")
        check_spd(self.K, f"fracture {self.id} K")
        poly = self.polygon
        if not is_convex_ccw(poly, eps):
            raise InvalidGeometry(f"fracture {self.id}: polygon not convex")

    @property
    def normal(self) -> np.ndarray:
        return self.frame.normal

    @cached_property
    def polygon(self) -> np.ndarray:
        """Vertices in the local frame, counter-clockwise."""
        return (self.vertices3d - self.frame.origin) @ self.frame.axes.T

    @property
    def area(self) -> float:
        return polygon_area(self.polygon)

    def signed_distance(self, points) -> np.ndarray:
        return (np.asarray(points, dtype=float) - self.frame.origin) @ self.frame.normal

    def to_local(self, p, eps: float | None = EPS_REL) -> np.ndarray:
        p = np.asarray(p, dtype=float)
        if eps is not None:
            dist = np.abs(self.signed_distance(p))
            if np.any(dist > eps):
                raise OffPlane(f"point off fracture {self.id} plane by {np.max(dist):.3e}")
        return (p - self.frame.origin) @ self.frame.axes.T

    def from_local(self, xy) -> np.ndarray:
        xy = np.asarray(xy, dtype=float)
        return self.frame.origin + xy @ self.frame.axes

    def vector_to_local(self, v) -> np.ndarray:
        return np.asarray(v, dtype=float) @ self.frame.axes.T


def to_local(fracture: Fracture, p, eps: float = EPS_REL) -> np.ndarray:
    return fracture.to_local(p, eps)


def from_local(fracture: Fracture, xy) -> np.ndarray:
    return fracture.from_local(xy)


@dataclass(eq=False)
class PorousDomain:
    """Axis-aligned box of porous matrix with its data.

    ``K`` is a 3x3 tensor or an array of per-tetrahedron tensors.
    ``face_bc`` maps each name in :data:`FACES` to one boundary condition.
    """

    box_min: np.ndarray
    box_max: np.ndarray
    K: np.ndarray = field(default_factory=lambda: np.eye(3))
    face_bc: dict = field(default_factory=dict)
    source: Value = 0.0

    def __post_init__(self):
        self.box_min = np.asarray(self.box_min, dtype=float)
        self.box_max = np.asarray(self.box_max, dtype=float)
        self.K = _as_tensor(self.K, 3)
        if np.any(self.box_max <= self.box_min):
            raise InvalidGeometry("box_max must exceed box_min")
        for name in FACES:
            self.face_bc.setdefault(name, Neumann(0.0))
        unknown = set(self.face_bc) - set(FACES)
        if unknown:
            raise InvalidGeometry(f"unknown box faces {sorted(unknown)}")
        check_spd(self.K, "K_matrix")

    @property
    def diameter(self) -> float:
        return float(np.linalg.norm(self.box_max - self.box_min))

    @property
    def eps(self) -> float:
        return EPS_REL * self.diameter

    @property
    def volume(self) -> float:
        return float(np.prod(self.box_max - self.box_min))

    def contains(self, points, eps: float | None = None) -> np.ndarray:
        eps = self.eps if eps is None else eps
        p = np.atleast_2d(points)
        return np.all((p >= self.box_min - eps) & (p <= self.box_max + eps), axis=1)

    def has_dirichlet(self) -> bool:
        return any(isinstance(bc, Dirichlet) for bc in self.face_bc.values())


@dataclass(eq=False)
class Trace:
    id: int
    endpoints3d: np.ndarray
    fracture_pair: tuple
    normal_on_i: np.ndarray
    normal_on_j: np.ndarray

    @property
    def length(self) -> float:
        return float(np.linalg.norm(self.endpoints3d[1] - self.endpoints3d[0]))

    def point(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=float)[..., None]
        a, b = self.endpoints3d
        return a + t * (b - a)


@dataclass(eq=False)
class FractureNetwork:
    domain: PorousDomain
    fractures: list

    def __post_init__(self):
        eps = self.eps
        for k, frac in enumerate(self.fractures):
            if not np.all(self.domain.contains(frac.vertices3d, eps)):
                raise InvalidGeometry(f"fracture {frac.id} leaves the domain box")

    @property
    def eps(self) -> float:
        return self.domain.eps

    @cached_property
    def traces(self) -> list:
        return compute_traces(self)

    def traces_of(self, i: int) -> list:
        """Indices of the traces on fracture ``i`` in increasing order."""
        return [m for m, tr in enumerate(self.traces) if i in tr.fracture_pair]


# ---------------------------------------------------------------------------
# 2D polygon kernels
# ---------------------------------------------------------------------------


def polygon_area(poly) -> float:
    p = np.asarray(poly, dtype=float)
    x, y = p[:, 0], p[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y))


def _area(pts) -> float:
    s = 0.0
    n = len(pts)
    for k in range(n):
        x0, y0 = pts[k]
        x1, y1 = pts[(k + 1) % n]
        s += x0 * y1 - x1 * y0
    return 0.5 * s


def is_convex_ccw(poly, eps: float = EPS_REL) -> bool:
    p = np.asarray(poly, dtype=float)
    if len(p) < 3 or polygon_area(p) <= 0.0:
        return False
    e = np.roll(p, -1, axis=0) - p
    en = np.roll(e, -1, axis=0)
    cross = e[:, 0] * en[:, 1] - e[:, 1] * en[:, 0]
    lens = np.linalg.norm(e, axis=1)
    if np.any(lens <= eps):
        return False
    # turning test scaled by the edge lengths: collinear vertices are allowed
    return bool(np.all(cross >= -eps * (lens + np.roll(lens, -1))))


def _dedupe(pts: list, eps: float) -> list:
    out = []
    for p in pts:
        if out and abs(p[0] - out[-1][0]) <= eps and abs(p[1] - out[-1][1]) <= eps:
            continue
        out.append(p)
    while len(out) > 1 and abs(out[0][0] - out[-1][0]) <= eps and abs(out[0][1] - out[-1][1]) <= eps:
        out.pop()
    if len(out) < 3 or _area(out) <= eps * eps:
        return []
    return out


def clip_halfplane(pts: list, px: float, py: float, nx: float, ny: float, eps: float) -> list:
    """Keep the part of ``pts`` where ``n . (x - p) >= 0`` (``n`` unit)."""
    d = [(x - px) * nx + (y - py) * ny for x, y in pts]
    if max(d) < eps:
        return []
    if min(d) >= -eps:
        return pts
    out = []
    n = len(pts)
    for k in range(n):
        dp = d[k]
        dq = d[(k + 1) % n]
        p = pts[k]
        if dp >= -eps:
            out.append(p)
        if (dp > eps and dq < -eps) or (dp < -eps and dq > eps):
            q = pts[(k + 1) % n]
            t = dp / (dp - dq)
            out.append((p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])))
    return _dedupe(out, eps)


def clip_convex(a: list, b: list, eps: float) -> list:
    """Intersection of two CCW convex polygons given as tuple lists."""
    out = a
    n = len(b)
    for k in range(n):
        x0, y0 = b[k]
        x1, y1 = b[(k + 1) % n]
        ex, ey = x1 - x0, y1 - y0
        ln = math.hypot(ex, ey)
        out = clip_halfplane(out, x0, y0, -ey / ln, ex / ln, eps)
        if not out:
            return []
    return out


def clip_segment_params(poly: list, ax, ay, bx, by, eps: float):
    """Parameter interval ``(t0, t1)`` of segment a->b inside ``poly``.

    Edges are widened by ``eps`` to decide whether the segment meets the
    polygon; the returned interval is the unwidened one whenever that is
    not empty, so endpoints land on the boundary rather than ``eps`` beyond.
    """
    res = _clip_segment(poly, ax, ay, bx, by, eps)
    if res is None or eps == 0.0:
        return res
    tight = _clip_segment(poly, ax, ay, bx, by, 0.0)
    return tight if tight is not None else res


def _clip_segment(poly: list, ax, ay, bx, by, eps: float):
    t0, t1 = 0.0, 1.0
    dx, dy = bx - ax, by - ay
    n = len(poly)
    for k in range(n):
        x0, y0 = poly[k]
        x1, y1 = poly[(k + 1) % n]
        ex, ey = x1 - x0, y1 - y0
        ln = math.hypot(ex, ey)
        nx, ny = -ey / ln, ex / ln
        f0 = (ax - x0) * nx + (ay - y0) * ny + eps
        fd = dx * nx + dy * ny
        if abs(fd) < 1e-300:
            if f0 < 0.0:
                return None
            continue
        t = -f0 / fd
        if fd > 0.0:
            if t > t0:
                t0 = t
        elif t < t1:
            t1 = t
        if t0 >= t1:
            return None
    return t0, t1


class ConvexPolygon2D:
    """Convex CCW polygon in a fracture's local frame."""

    __slots__ = ("vertices",)

    def __init__(self, vertices):
        self.vertices = np.asarray(vertices, dtype=float).reshape(-1, 2)

    @property
    def area(self) -> float:
        return polygon_area(self.vertices)

    def as_list(self) -> list:
        return [tuple(p) for p in self.vertices.tolist()]

    def is_valid(self, eps: float = EPS_REL) -> bool:
        return is_convex_ccw(self.vertices, eps)

    def __len__(self):
        return len(self.vertices)

    def __repr__(self):
        return f"ConvexPolygon2D({self.vertices.tolist()})"


def _as_list(poly) -> list:
    if isinstance(poly, ConvexPolygon2D):
        return poly.as_list()
    return [tuple(map(float, p)) for p in np.asarray(poly, dtype=float).reshape(-1, 2)]


def clip_polygon_halfplane(poly, line, eps: float = EPS_REL) -> ConvexPolygon2D | None:
    """Clip ``poly`` by the halfplane ``{x : n . (x - p) >= 0}``.

    ``line`` is ``(p, n)`` with ``n`` the inward normal (normalised here).
    Returns ``None`` when nothing of positive width remains.
    """
    p, n = (np.asarray(v, dtype=float) for v in line)
    n = n / np.linalg.norm(n)
    out = clip_halfplane(_as_list(poly), p[0], p[1], n[0], n[1], eps)
    return ConvexPolygon2D(out) if out else None


def intersect_convex_polygons(a, b, eps: float = EPS_REL) -> ConvexPolygon2D | None:
    out = clip_convex(_as_list(a), _as_list(b), eps)
    return ConvexPolygon2D(out) if out else None


def intersect_polygon_segment(poly, seg, eps: float = EPS_REL) -> np.ndarray | None:
    """Portion of ``seg`` (2x2 array) inside ``poly``, or ``None``."""
    a, b = np.asarray(seg, dtype=float)
    res = clip_segment_params(_as_list(poly), a[0], a[1], b[0], b[1], eps)
    if res is None:
        return None
    t0, t1 = res
    if (t1 - t0) * np.linalg.norm(b - a) <= eps:
        return None
    return np.vstack([a + t0 * (b - a), a + t1 * (b - a)])


# ---------------------------------------------------------------------------
# Traces
# ---------------------------------------------------------------------------


def _line_interval(frac: Fracture, p: np.ndarray, d: np.ndarray, reach: float, eps: float):
    """Interval of ``p + s d`` inside ``frac`` for ``|s| <= reach``."""
    a = frac.to_local(p - reach * d, eps=None)
    b = frac.to_local(p + reach * d, eps=None)
    res = clip_segment_params(_as_list(frac.polygon), a[0], a[1], b[0], b[1], eps)
    if res is None:
        return None
    t0, t1 = res
    return -reach + 2.0 * reach * t0, -reach + 2.0 * reach * t1


def _pair_trace(fi: Fracture, fj: Fracture, eps: float, reach: float):
    ni, nj = fi.normal, fj.normal
    d = np.cross(ni, nj)
    sin = np.linalg.norm(d)
    if sin < 1e-12:
        if abs(fi.signed_distance(fj.frame.origin)) <= eps:
            other = fi.to_local(fj.vertices3d, eps=None)
            if polygon_area(other) < 0:
                other = other[::-1]
            overlap = intersect_convex_polygons(fi.polygon, other, eps)
            if overlap is not None and overlap.area > eps * reach:
                raise NonSegmentIntersection(
                    f"fractures {fi.id} and {fj.id} overlap in a planar region"
                )
        return None
    d = d / sin
    # point on both planes closest to the origin of fracture i
    A = np.vstack([ni, nj, d])
    rhs = np.array([ni @ fi.frame.origin, nj @ fj.frame.origin, d @ fi.frame.origin])
    p = np.linalg.solve(A, rhs)
    si = _line_interval(fi, p, d, reach, eps)
    if si is None:
        return None
    sj = _line_interval(fj, p, d, reach, eps)
    if sj is None:
        return None
    s0, s1 = max(si[0], sj[0]), min(si[1], sj[1])
    if s1 - s0 <= eps:
        return None
    return np.vstack([p + s0 * d, p + s1 * d])


def _in_plane_normal(frac: Fracture, direction: np.ndarray) -> np.ndarray:
    dl = frac.vector_to_local(direction)
    nl = np.array([-dl[1], dl[0]]) / np.linalg.norm(dl)
    return nl @ frac.frame.axes


def compute_traces(network: FractureNetwork) -> list:
    """All fracture-fracture intersection segments of the network.

    Trace ``m`` stores the fracture positions ``(i, j)`` with ``i < j`` and
    the in-plane normals obtained by rotating the trace direction by +90
    degrees in each fracture's frame.
    """
    fr = network.fractures
    eps = network.eps
    reach = 4.0 * network.domain.diameter + float(np.linalg.norm(network.domain.box_max))
    traces = []
    for i in range(len(fr)):
        for j in range(i + 1, len(fr)):
            seg = _pair_trace(fr[i], fr[j], eps, reach)
            if seg is None:
                continue
            direction = seg[1] - seg[0]
            traces.append(
                Trace(
                    len(traces),
                    seg,
                    (i, j),
                    _in_plane_normal(fr[i], direction),
                    _in_plane_normal(fr[j], direction),
                )
            )
    _check_shared_segments(traces, eps)
    return traces


def _check_shared_segments(traces: list, eps: float) -> None:
    for a in range(len(traces)):
        pa, qa = traces[a].endpoints3d
        da = qa - pa
        la = np.linalg.norm(da)
        ua = da / la
        for b in range(a + 1, len(traces)):
            pb, qb = traces[b].endpoints3d
            off_p = (pb - pa) - ((pb - pa) @ ua) * ua
            off_q = (qb - pa) - ((qb - pa) @ ua) * ua
            if np.linalg.norm(off_p) > eps or np.linalg.norm(off_q) > eps:
                continue
            sb = sorted([(pb - pa) @ ua, (qb - pa) @ ua])
            if min(la, sb[1]) - max(0.0, sb[0]) > eps:
                raise AssumptionViolated(
                    f"traces {a} and {b} overlap: a segment belongs to more than two fractures"
                )
