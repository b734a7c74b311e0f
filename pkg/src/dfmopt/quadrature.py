"""Quadrature rules on segments, triangles and tetrahedra.

Triangle and tetrahedron points are returned as barycentric coordinates
(one column per vertex) so callers can map them with the vertex array.
"""
from __future__ import annotations

from functools import lru_cache

import numpy as np
from scipy.special import roots_jacobi, roots_legendre

# edge-midpoint rule, exact for degree 2
TRI_MIDPOINT_BARY = np.array([[0.5, 0.5, 0.0], [0.0, 0.5, 0.5], [0.5, 0.0, 0.5]])
TRI_MIDPOINT_W = np.full(3, 1.0 / 3.0)


@lru_cache(maxsize=None)
def gauss_segment(n: int):
    """``n``-point Gauss rule on [0, 1]: (points, weights summing to 1)."""
    x, w = roots_legendre(n)
    return 0.5 * (x + 1.0), 0.5 * w


@lru_cache(maxsize=None)
def tet_degree2():
    """4-point rule exact for quadratics; weights sum to 1."""
    a = (5.0 - np.sqrt(5.0)) / 20.0
    b = 1.0 - 3.0 * a
    bary = np.full((4, 4), a)
    np.fill_diagonal(bary, b)
    return bary, np.full(4, 0.25)


@lru_cache(maxsize=None)
def conical_triangle(n: int = 3):
    """Collapsed-coordinate Gauss-Jacobi rule, exact to degree ``2n - 1``."""
    x0, w0 = roots_jacobi(n, 1.0, 0.0)
    x1, w1 = roots_legendre(n)
    s = 0.5 * (x0 + 1.0)
    t = 0.5 * (x1 + 1.0)
    S, T = np.meshgrid(s, t, indexing="ij")
    W = np.outer(w0 / 4.0, w1 / 2.0)
    l1 = S.ravel()
    l2 = ((1.0 - S) * T).ravel()
    bary = np.column_stack([1.0 - l1 - l2, l1, l2])
    w = W.ravel()
    return bary, w / w.sum()


@lru_cache(maxsize=None)
def conical_tet(n: int = 3):
    """Collapsed-coordinate Gauss-Jacobi rule on the tetrahedron."""
    x0, w0 = roots_jacobi(n, 2.0, 0.0)
    x1, w1 = roots_jacobi(n, 1.0, 0.0)
    x2, w2 = roots_legendre(n)
    a, b, c = (0.5 * (x + 1.0) for x in (x0, x1, x2))
    A, B, C = np.meshgrid(a, b, c, indexing="ij")
    W = np.einsum("i,j,k->ijk", w0, w1, w2)
    l1 = A.ravel()
    l2 = ((1.0 - A) * B).ravel()
    l3 = ((1.0 - A) * (1.0 - B) * C).ravel()
    bary = np.column_stack([1.0 - l1 - l2 - l3, l1, l2, l3])
    w = W.ravel()
    return bary, w / w.sum()


def fan_triangles(poly) -> list:
    """Fan sub-triangles of a convex polygon from its first vertex."""
    p0 = poly[0]
    return [(p0, poly[k], poly[k + 1]) for k in range(1, len(poly) - 1)]


def polygon_rule(poly):
    """Degree-2 rule on a convex polygon (fan of midpoint rules)."""
    pts, wts = [], []
    for a, b, c in fan_triangles(poly):
        area = 0.5 * ((b[0] - a[0]) * (c[1] - a[1]) - (c[0] - a[0]) * (b[1] - a[1]))
        if area <= 0.0:
            continue
        pts.extend(
            [
                (0.5 * (a[0] + b[0]), 0.5 * (a[1] + b[1])),
                (0.5 * (b[0] + c[0]), 0.5 * (b[1] + c[1])),
                (0.5 * (a[0] + c[0]), 0.5 * (a[1] + c[1])),
            ]
        )
        wts.extend([area / 3.0] * 3)
    return pts, wts
