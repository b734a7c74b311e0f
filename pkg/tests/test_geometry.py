from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dfmopt.errors import AssumptionViolated, InvalidGeometry, NonSegmentIntersection, OffPlane
from dfmopt.geometry import (
    ConvexPolygon2D,
    Dirichlet,
    Fracture,
    FractureNetwork,
    Neumann,
    PorousDomain,
    clip_polygon_halfplane,
    compute_traces,
    intersect_convex_polygons,
    intersect_polygon_segment,
    polygon_area,
)
from dfmopt.harness import generate_random_dfn

UNIT_SQUARE = [(0, 0), (1, 0), (1, 1), (0, 1)]


def _unit_box():
    return PorousDomain([-1, -1, -1], [2, 2, 2])


def test_orthogonal_squares_one_trace():
    dom = _unit_box()
    f0 = Fracture.from_vertices(0, [[0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0]])
    f1 = Fracture.from_vertices(1, [[0.5, 0, -0.5], [0.5, 1, -0.5], [0.5, 1, 0.5], [0.5, 0, 0.5]])
    traces = compute_traces(FractureNetwork(dom, [f0, f1]))
    assert len(traces) == 1
    seg = sorted(map(tuple, np.round(traces[0].endpoints3d, 12)))
    assert np.allclose(seg, [(0.5, 0, 0), (0.5, 1, 0)], atol=1e-12)
    assert traces[0].fracture_pair == (0, 1)
    assert np.isclose(traces[0].length, 1.0)


def test_parallel_disjoint_no_trace():
    f0 = Fracture.from_vertices(0, [[0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0]])
    f1 = Fracture.from_vertices(1, [[0, 0, 0.5], [1, 0, 0.5], [1, 1, 0.5], [0, 1, 0.5]])
    assert compute_traces(FractureNetwork(_unit_box(), [f0, f1])) == []


def test_point_contact_no_trace():
    f0 = Fracture.from_vertices(0, [[0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0]])
    f1 = Fracture.from_vertices(1, [[1, 1, 0], [1.5, 1.5, 0.5], [1, 1.5, 1.0]])
    assert compute_traces(FractureNetwork(_unit_box(), [f0, f1])) == []


def test_coplanar_overlap_raises():
    f0 = Fracture.from_vertices(0, [[0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0]])
    f1 = Fracture.from_vertices(1, [[0.5, 0.5, 0], [1.5, 0.5, 0], [1.5, 1.5, 0], [0.5, 1.5, 0]])
    with pytest.raises(NonSegmentIntersection):
        compute_traces(FractureNetwork(_unit_box(), [f0, f1]))


def test_shared_segment_by_three_fractures_raises():
    f0 = Fracture.from_vertices(0, [[0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0]])
    f1 = Fracture.from_vertices(1, [[0.5, 0, -0.5], [0.5, 1, -0.5], [0.5, 1, 0.5], [0.5, 0, 0.5]])
    f2 = Fracture.from_vertices(2, [[0, 0, -0.5], [1, 0, 0.5], [1, 1, 0.5], [0, 1, -0.5]])
    with pytest.raises(AssumptionViolated):
        compute_traces(FractureNetwork(_unit_box(), [f0, f1, f2]))


def test_traces_symmetric_under_permutation():
    net = generate_random_dfn(3, 8)
    a = {tuple(sorted(map(tuple, np.round(t.endpoints3d, 9)))) for t in net.traces}
    rev = [Fracture.from_vertices(k, f.vertices3d) for k, f in enumerate(reversed(net.fractures))]
    b = {tuple(sorted(map(tuple, np.round(t.endpoints3d, 9)))) for t in compute_traces(FractureNetwork(net.domain, rev))}
    assert a == b


def test_trace_normals_in_plane_and_orthogonal():
    net = generate_random_dfn(2, 10)
    for tr in net.traces:
        d = tr.endpoints3d[1] - tr.endpoints3d[0]
        for k, n in zip(tr.fracture_pair, (tr.normal_on_i, tr.normal_on_j)):
            assert abs(np.linalg.norm(n) - 1) < 1e-12
            assert abs(n @ d) < 1e-9
            assert abs(n @ net.fractures[k].normal) < 1e-9


# ---------------------------------------------------------------------------
# Exact rational oracle for the traces of a generated network
# ---------------------------------------------------------------------------


def _fr(v):
    return [Fraction(float(x)) for x in v]


def _sub(a, b):
    return [x - y for x, y in zip(a, b)]


def _dot(a, b):
    return sum(x * y for x, y in zip(a, b))


def _cross(a, b):
    return [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]


def _exact_plane(verts):
    n = [Fraction(0)] * 3
    for k in range(len(verts)):
        p, q = verts[k], verts[(k + 1) % len(verts)]
        n = [n[0] + (p[1] - q[1]) * (p[2] + q[2]), n[1] + (p[2] - q[2]) * (p[0] + q[0]), n[2] + (p[0] - q[0]) * (p[1] + q[1])]
    c = [sum(v[a] for v in verts) / len(verts) for a in range(3)]
    return n, c


def _exact_clip(verts, n, p0, d, lo, hi):
    for k in range(len(verts)):
        a, b = verts[k], verts[(k + 1) % len(verts)]
        inward = _cross(n, _sub(b, a))
        f0 = _dot(inward, _sub(p0, a))
        fd = _dot(inward, d)
        if fd == 0:
            if f0 < 0:
                return None
            continue
        t = -f0 / fd
        if fd > 0:
            lo = t if lo is None or t > lo else lo
        else:
            hi = t if hi is None or t < hi else hi
    return lo, hi


def _exact_trace(fi, fj):
    vi, vj = [_fr(v) for v in fi.vertices3d], [_fr(v) for v in fj.vertices3d]
    ni, ci = _exact_plane(vi)
    nj, cj = _exact_plane(vj)
    d = _cross(ni, nj)
    dd = _dot(d, d)
    if dd == 0:
        return None
    # point on both planes: p = (a (nj x d) + b (d x ni)) / dd with a = ni.ci, b = nj.cj
    a, b = _dot(ni, ci), _dot(nj, cj)
    p0 = [(a * x + b * y) / dd for x, y in zip(_cross(nj, d), _cross(d, ni))]
    res = _exact_clip(vi, ni, p0, d, None, None)
    if res is None:
        return None
    res = _exact_clip(vj, nj, p0, d, *res)
    if res is None or res[0] is None or res[1] is None or res[1] <= res[0]:
        return None
    return [[float(x + t * y) for x, y in zip(p0, d)] for t in res]


def test_generated_network_traces_match_exact_oracle():
    net = generate_random_dfn(1, 20)
    fr = net.fractures
    eps = net.eps
    exact = {}
    for i in range(len(fr)):
        for j in range(i + 1, len(fr)):
            seg = _exact_trace(fr[i], fr[j])
            if seg is not None and np.linalg.norm(np.subtract(seg[1], seg[0])) > eps:
                exact[(i, j)] = np.array(seg)
    got = {tr.fracture_pair: tr.endpoints3d for tr in net.traces}
    assert set(got) == set(exact)
    for key, seg in exact.items():
        g = got[key]
        same = np.allclose(g, seg, atol=1e-9) or np.allclose(g[::-1], seg, atol=1e-9)
        assert same, key


# ---------------------------------------------------------------------------
# Local frames
# ---------------------------------------------------------------------------


def test_to_local_axis_aligned():
    f = Fracture.from_vertices(0, [[0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0]])
    xy = f.to_local([[0.3, 0.7, 0.0]])
    back = f.from_local(xy)
    assert np.allclose(back, [[0.3, 0.7, 0.0]], atol=1e-12)
    assert np.isclose(polygon_area(f.polygon), 1.0)


def test_local_round_trip_and_isometry():
    rng = np.random.default_rng(0)
    v = np.array([[0.1, 0.2, 0.3], [0.9, 0.1, 0.5], [0.8, 0.9, 0.9], [0.2, 0.7, 0.6]])
    n = np.cross(v[1] - v[0], v[2] - v[0])
    v[3] -= ((v[3] - v[0]) @ n) / (n @ n) * n
    f = Fracture.from_vertices(0, v)
    xy = rng.uniform(-1, 1, size=(1000, 2))
    p = f.from_local(xy)
    assert np.max(np.abs(f.to_local(p) - xy)) < 1e-12
    d3 = np.linalg.norm(p[:50, None] - p[None, :50], axis=2)
    d2 = np.linalg.norm(xy[:50, None] - xy[None, :50], axis=2)
    assert np.max(np.abs(d3 - d2)) < 1e-12


def test_to_local_off_plane_raises():
    f = Fracture.from_vertices(0, [[0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0]])
    with pytest.raises(OffPlane):
        f.to_local([[0.5, 0.5, 0.1]])


def test_non_coplanar_fracture_rejected():
    with pytest.raises(InvalidGeometry):
        Fracture.from_vertices(0, [[0, 0, 0], [1, 0, 0], [1, 1, 0.1], [0, 1, 0]])


def test_domain_rejects_non_spd_tensor():
    with pytest.raises(InvalidGeometry):
        PorousDomain([0, 0, 0], [1, 1, 1], np.diag([1.0, -1.0, 1.0]))


def test_domain_faces_default_to_insulated():
    dom = PorousDomain([0, 0, 0], [1, 1, 1], face_bc={"zmin": Dirichlet(0.0)})
    assert isinstance(dom.face_bc["zmax"], Neumann)
    assert dom.has_dirichlet()


# ---------------------------------------------------------------------------
# Clipping kernels
# ---------------------------------------------------------------------------


def test_clip_square_by_halfplane():
    out = clip_polygon_halfplane(UNIT_SQUARE, ((0.5, 0.0), (1.0, 0.0)))
    assert np.isclose(out.area, 0.5)
    assert np.allclose(out.vertices[:, 0].min(), 0.5)


def test_clip_identity_when_inside():
    out = clip_polygon_halfplane(UNIT_SQUARE, ((-1.0, 0.0), (1.0, 0.0)))
    assert np.allclose(out.vertices, UNIT_SQUARE)


def test_clip_empty():
    assert clip_polygon_halfplane(UNIT_SQUARE, ((2.0, 0.0), (1.0, 0.0))) is None


def test_triangle_self_intersection():
    t = [(0, 0), (1, 0), (0, 1)]
    out = intersect_convex_polygons(t, t)
    assert np.isclose(out.area, 0.5)


def test_disjoint_triangles():
    assert intersect_convex_polygons([(0, 0), (1, 0), (0, 1)], [(2, 2), (3, 2), (2, 3)]) is None


def test_segment_clip():
    seg = intersect_polygon_segment(UNIT_SQUARE, [(-1, 0.5), (2, 0.5)])
    assert np.allclose(seg, [(0, 0.5), (1, 0.5)])
    assert intersect_polygon_segment(UNIT_SQUARE, [(2, 2), (3, 3)]) is None


def test_segment_clip_against_sampling():
    rng = np.random.default_rng(4)
    for _ in range(20):
        a, b = rng.uniform(-0.5, 1.5, size=(2, 2))
        seg = intersect_polygon_segment(UNIT_SQUARE, [a, b])
        t = np.linspace(0, 1, 10_001)
        pts = a + t[:, None] * (b - a)
        inside = np.all((pts >= 0) & (pts <= 1), axis=1)
        if not inside.any():
            assert seg is None or np.linalg.norm(seg[1] - seg[0]) < 1e-3
            continue
        step = np.linalg.norm(b - a) / 10_000
        lo, hi = pts[inside][0], pts[inside][-1]
        assert np.linalg.norm(seg[0] - lo) <= step + 1e-12
        assert np.linalg.norm(seg[1] - hi) <= step + 1e-12


def _random_convex(rng, n=6):
    ang = np.sort(rng.uniform(0, 2 * np.pi, n))
    r = rng.uniform(0.2, 0.5)
    return ConvexPolygon2D(np.column_stack([0.5 + r * np.cos(ang), 0.5 + r * np.sin(ang)]))


def test_random_halfplane_area_against_monte_carlo():
    rng = np.random.default_rng(7)
    poly = _random_convex(rng)
    p, n = (0.5, 0.45), (0.3, 1.0)
    out = clip_polygon_halfplane(poly, (p, n))
    pts = rng.uniform(0, 1, size=(1_000_000, 2))
    inside = np.ones(len(pts), dtype=bool)
    v = poly.vertices
    for k in range(len(v)):
        a, b = v[k], v[(k + 1) % len(v)]
        inside &= (b[0] - a[0]) * (pts[:, 1] - a[1]) - (b[1] - a[1]) * (pts[:, 0] - a[0]) >= 0
    inside &= (pts - p) @ np.array(n) >= 0
    mc = inside.mean()
    sigma = np.sqrt(mc * (1 - mc) / len(pts))
    assert abs(out.area - mc) <= 3 * sigma


coords = st.floats(-2, 2, allow_nan=False, allow_infinity=False)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000), coords, coords, st.floats(0, 2 * np.pi))
def test_area_additivity_and_idempotence(seed, px, py, theta):
    poly = _random_convex(np.random.default_rng(seed))
    n = np.array([np.cos(theta), np.sin(theta)])
    line_p = (0.5 + 0.2 * px, 0.5 + 0.2 * py)
    plus = clip_polygon_halfplane(poly, (line_p, n))
    minus = clip_polygon_halfplane(poly, (line_p, -n))
    area = (plus.area if plus else 0.0) + (minus.area if minus else 0.0)
    assert abs(area - poly.area) <= 1e-10 * poly.area
    if plus is not None:
        again = clip_polygon_halfplane(plus, (line_p, n))
        assert again is not None and np.allclose(again.vertices, plus.vertices, atol=1e-9)
    inter = intersect_convex_polygons(poly, plus.vertices) if plus else None
    if inter is not None:
        assert inter.area <= min(poly.area, plus.area) + 1e-12
