"""Error norms against analytic solutions, rate fits and field export."""
from __future__ import annotations

import csv
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Callable

import numpy as np
from scipy.spatial import Delaunay, QhullError

from .errors import DegenerateFit
from .intersection import build_overlap_table, segment_partition
from .mesh import TetMesh, TriMesh
from .quadrature import conical_tet, conical_triangle, gauss_segment


@dataclass
class AnalyticSolution:
    """Exact head in the matrix and on the fractures.

    ``fracture_value`` and ``fracture_gradient`` take 3D points on the
    fracture; the gradient is returned in 3D and projected on the plane by
    the caller.  They default to the matrix functions.
    """

    value: Callable
    gradient: Callable
    fracture_value: Callable | None = None
    fracture_gradient: Callable | None = None

    def on_fracture(self):
        return (self.fracture_value or self.value, self.fracture_gradient or self.gradient)


@dataclass
class ConvergenceRow:
    level: int
    delta_D: float
    delta_F: float
    errL2_D: float
    errH1_D: float
    errL2_F: float
    errH1_F: float
    iters: int
    functional: float


CSV_HEADER = [f.name for f in fields(ConvergenceRow)]


@dataclass
class ErrorNorms:
    L2_D: float
    H1_D: float
    L2_F: float
    H1_F: float

    @property
    def H1full_D(self) -> float:
        return float(np.hypot(self.L2_D, self.H1_D))

    @property
    def H1full_F(self) -> float:
        return float(np.hypot(self.L2_F, self.H1_F))


# ---------------------------------------------------------------------------
# Sub-cells of tets cut by fracture planes
# ---------------------------------------------------------------------------


def _split_convex(points: np.ndarray, origin, normal, eps: float):
    d = (points - origin) @ normal
    pos, neg = d > eps, d < -eps
    if not pos.any() or not neg.any():
        return [points]
    cuts = []
    for a in np.flatnonzero(neg):
        for b in np.flatnonzero(pos):
            t = d[a] / (d[a] - d[b])
            cuts.append(points[a] + t * (points[b] - points[a]))
    cuts = np.array(cuts)
    on = points[~pos & ~neg]
    upper = np.vstack([points[pos], on, cuts])
    lower = np.vstack([points[neg], on, cuts])
    return [upper, lower]


def _tetrahedralise(points: np.ndarray, scale: float):
    try:
        tri = Delaunay(points)
    except QhullError:
        return np.zeros((0, 4, 3))
    tets = points[tri.simplices]
    vol = np.abs(np.linalg.det(tets[:, 1:] - tets[:, :1])) / 6.0
    return tets[vol > 1e-14 * scale**3]


def cut_subcells(mesh: TetMesh, planes: list, eps: float):
    """Sub-tetrahedra of tets crossed by any plane ``(origin, normal)``.

    Returns ``(parent, subtets)`` for cut tets and the mask of cut tets.
    """
    cut = np.zeros(mesh.n_tets, dtype=bool)
    for origin, normal in planes:
        d = (mesh.vertices - origin) @ normal
        dt = d[mesh.tets]
        cut |= (dt.max(axis=1) > eps) & (dt.min(axis=1) < -eps)
    parents, subs = [], []
    for t in np.flatnonzero(cut):
        x = mesh.vertices[mesh.tets[t]]
        scale = float(np.max(np.ptp(x, axis=0)))
        pieces = [x]
        for origin, normal in planes:
            pieces = [q for p in pieces for q in _split_convex(p, origin, normal, eps)]
        for p in pieces:
            st = _tetrahedralise(p, scale)
            subs.append(st)
            parents.extend([t] * len(st))
    sub = np.concatenate(subs) if subs else np.zeros((0, 4, 3))
    return np.array(parents, dtype=np.int64), sub, cut


def _tet_error(mesh, h, exact, cells, parents):
    """(L2^2, H1-seminorm^2) contributions of sub-tets ``cells``."""
    if len(cells) == 0:
        return 0.0, 0.0
    bary, w = conical_tet(3)
    vol = np.abs(np.linalg.det(cells[:, 1:] - cells[:, :1])) / 6.0
    pts = np.einsum("qa,nai->nqi", bary, cells)
    flat = pts.reshape(-1, 3)
    par = np.repeat(parents, len(w))
    lam = mesh.barycentric(par, flat)
    hv = np.sum(lam * h[mesh.tets[par]], axis=1)
    grad_h = np.einsum("na,nai->ni", h[mesh.tets[parents]], mesh.gradients[parents])
    ev = np.asarray(exact.value(flat), dtype=float)
    eg = np.asarray(exact.gradient(flat), dtype=float)
    wq = (vol[:, None] * w[None, :]).ravel()
    l2 = float(np.sum(wq * (hv - ev) ** 2))
    dg = np.repeat(grad_h, len(w), axis=0) - eg
    h1 = float(np.sum(wq * np.sum(dg * dg, axis=1)))
    return l2, h1


def matrix_errors(mesh: TetMesh, h: np.ndarray, exact: AnalyticSolution, planes=(), eps=1e-9, chunk=20000):
    """L2 and H1-seminorm errors of the matrix head.

    Tets crossed by one of ``planes`` are integrated piecewise on each side
    so a gradient jump across a fracture never falls inside a quadrature
    cell.
    """
    planes = list(planes)
    if planes:
        parents, subs, cut = cut_subcells(mesh, planes, eps)
    else:
        parents, subs, cut = np.zeros(0, dtype=np.int64), np.zeros((0, 4, 3)), np.zeros(mesh.n_tets, bool)
    whole = np.flatnonzero(~cut)
    l2 = h1 = 0.0
    for s in range(0, len(whole), chunk):
        ids = whole[s : s + chunk]
        a, b = _tet_error(mesh, h, exact, mesh.vertices[mesh.tets[ids]], ids)
        l2 += a
        h1 += b
    a, b = _tet_error(mesh, h, exact, subs, parents)
    return float(np.sqrt(l2 + a)), float(np.sqrt(h1 + b))


def fracture_errors(meshes: list, fractures: list, heads: list, exact: AnalyticSolution):
    """L2 and H1-seminorm errors summed over all fractures."""
    fv, fg = exact.on_fracture()
    bary, w = conical_triangle(3)
    l2 = h1 = 0.0
    for mesh, frac, h in zip(meshes, fractures, heads):
        pts = np.einsum("qa,nai->nqi", bary, mesh.corners)
        flat = pts.reshape(-1, 2)
        x3 = frac.from_local(flat)
        hv = np.einsum("qa,na->nq", bary, h[mesh.tris]).ravel()
        grad_h = np.einsum("na,nai->ni", h[mesh.tris], mesh.gradients)
        eg = frac.vector_to_local(np.asarray(fg(x3), dtype=float))
        wq = (mesh.areas[:, None] * w[None, :]).ravel()
        l2 += float(np.sum(wq * (hv - np.asarray(fv(x3), dtype=float)) ** 2))
        dg = np.repeat(grad_h, len(w), axis=0) - eg
        h1 += float(np.sum(wq * np.sum(dg * dg, axis=1)))
    return float(np.sqrt(l2)), float(np.sqrt(h1))


def error_norms(disc, h: np.ndarray, exact: AnalyticSolution, split: bool = True) -> ErrorNorms:
    """Matrix and fracture errors of a solved discretisation.

    ``h`` holds free head values ordered ``[h_D; h_F]``.
    """
    system = disc.system
    h_D, h_F = system.full_heads(h)
    planes = [(f.frame.origin, f.normal) for f in disc.network.fractures] if split else []
    L2_D, H1_D = matrix_errors(disc.tet_mesh, h_D, exact, planes, disc.network.eps)
    L2_F, H1_F = fracture_errors(disc.h_meshes, disc.network.fractures, h_F, exact)
    return ErrorNorms(L2_D, H1_D, L2_F, H1_F)


# ---------------------------------------------------------------------------
# Mismatch functional by direct quadrature
# ---------------------------------------------------------------------------


def _owned(parts, mids):
    tri, s0, s1 = parts
    idx = np.searchsorted(s0, mids, side="right") - 1
    ok = (idx >= 0) & (mids <= s1[np.clip(idx, 0, len(s1) - 1)] if len(s1) else np.zeros(len(mids), bool))
    return np.where(ok, tri[np.clip(idx, 0, max(len(tri) - 1, 0))] if len(tri) else -1, -1)


def functional_terms(disc, h: np.ndarray, w: np.ndarray) -> dict:
    """Mismatch functional integrated pointwise, term by term.

    Returns the matrix-fracture term ``sum_i ||h_D - h_i||^2``, the trace
    continuity term ``sum_m ||h_i - h_j||^2`` and the trace flux term
    ``sum_m ||u_i + u_j - alpha (h_i + h_j)||^2``.  Independent of the
    assembled matrices, so it cross-checks them.
    """
    system = disc.system
    h_D, h_F = system.full_heads(h)
    eps = disc.network.eps
    fr = disc.network.fractures
    tet = disc.tet_mesh
    out = {"matrix_fracture": 0.0, "trace_continuity": 0.0, "trace_flux": 0.0}
    for i, (im, hm) in enumerate(zip(disc.interface_meshes, disc.h_meshes)):
        table = build_overlap_table(im, hm, "tri-tri", eps)
        if not len(table):
            continue
        x3 = fr[i].from_local(table.q_points)
        parent = im.parent_tet[table.q_a]
        vD = np.sum(tet.barycentric(parent, x3) * h_D[tet.tets[parent]], axis=1)
        b = table.q_b
        vF = np.sum(hm.barycentric(b, table.q_points) * h_F[i][hm.tris[b]], axis=1)
        out["matrix_fracture"] += float(np.sum(table.q_weights * (vD - vF) ** 2))
    lay = disc.layout
    u = w[lay.n_q :]
    gx, gw = gauss_segment(3)
    for m, tb in enumerate(disc.trace_blocks):
        tr = disc.network.traces[m]
        t0, t1 = tb.partition[:, 0], tb.partition[:, 1]
        mids = 0.5 * (t0 + t1)
        tq = (t0[:, None] + (t1 - t0)[:, None] * gx[None, :]).ravel()
        wq = (tr.length * (t1 - t0)[:, None] * gw[None, :]).ravel()
        pts3 = tr.point(tq)
        hv, uv = {}, {}
        for k in (tb.i, tb.j):
            a, b = fr[k].to_local(tr.endpoints3d, eps=None)
            owner = np.repeat(_owned(segment_partition(disc.h_meshes[k].corners, a, b, eps), mids), len(gx))
            loc = fr[k].to_local(pts3, eps=None)
            hm = disc.h_meshes[k]
            hv[k] = np.sum(hm.barycentric(owner, loc) * h_F[k][hm.tris[owner]], axis=1)
            sm = disc.seg_meshes[(k, m)]
            elem = np.clip(np.searchsorted(sm.param_breaks, np.repeat(mids, len(gx)), side="right") - 1, 0, sm.n_elements - 1)
            uv[k] = u[lay.u_slice(k, m)][elem]
        alpha = system.alpha
        out["trace_continuity"] += float(np.sum(wq * (hv[tb.i] - hv[tb.j]) ** 2))
        out["trace_flux"] += float(np.sum(wq * (uv[tb.i] + uv[tb.j] - alpha * (hv[tb.i] + hv[tb.j])) ** 2))
    return out


def functional_by_quadrature(disc, h: np.ndarray, w: np.ndarray) -> float:
    return float(sum(functional_terms(disc, h, w).values()))


# ---------------------------------------------------------------------------
# Rates
# ---------------------------------------------------------------------------


def fit_slope(deltas, errors) -> float:
    deltas = np.asarray(deltas, dtype=float)
    errors = np.asarray(errors, dtype=float)
    if np.any(errors < 1e-15):
        raise DegenerateFit("error below 1e-15: slope undefined")
    return float(np.polyfit(np.log(deltas), np.log(errors), 1)[0])


def fit_rates(rows: list, mesh_size: str = "delta_D") -> dict:
    """Least-squares log-log slopes of every error column against ``delta``."""
    if len(rows) < 3:
        raise DegenerateFit("at least three rows are needed")
    deltas = [getattr(r, mesh_size) for r in rows]
    cols = ("errL2_D", "errH1_D", "errL2_F", "errH1_F")
    return {c: fit_slope(deltas, [getattr(r, c) for r in rows]) for c in cols}


# ---------------------------------------------------------------------------
# Export
# ---------------------------------------------------------------------------


def _write_vtk(path, points3d, cells, cell_type: int, values, title: str):
    with open(path, "w") as fh:
        fh.write("# vtk DataFile Version 3.0\n")
        fh.write(f"{title}\nASCII\nDATASET UNSTRUCTURED_GRID\n")
        fh.write(f"POINTS {len(points3d)} double\n")
        for p in points3d:
            fh.write(f"{float(p[0])!r} {float(p[1])!r} {float(p[2])!r}\n")
        k = cells.shape[1]
        fh.write(f"CELLS {len(cells)} {len(cells) * (k + 1)}\n")
        for c in cells:
            fh.write(f"{k} " + " ".join(map(str, c)) + "\n")
        fh.write(f"CELL_TYPES {len(cells)}\n")
        fh.write(f"{cell_type}\n" * len(cells))
        fh.write(f"POINT_DATA {len(points3d)}\n")
        fh.write("SCALARS hydraulic_head double 1\nLOOKUP_TABLE default\n")
        for v in values:
            fh.write(f"{float(v)!r}\n")


def write_vtk_tet(mesh: TetMesh, h: np.ndarray, path) -> None:
    _write_vtk(path, mesh.vertices, mesh.tets, 10, h, "matrix hydraulic head")


def write_vtk_fracture(mesh: TriMesh, fracture, h: np.ndarray, path) -> None:
    _write_vtk(path, fracture.from_local(mesh.vertices), mesh.tris, 5, h, f"fracture {fracture.id} hydraulic head")


def write_convergence_csv(rows: list, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_HEADER)
        for r in rows:
            writer.writerow([getattr(r, c) if c in ("level", "iters") else repr(float(getattr(r, c))) for c in CSV_HEADER])


def read_convergence_csv(path) -> list:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        return [
            ConvergenceRow(**{k: (int(v) if k in ("level", "iters") else float(v)) for k, v in row.items()})
            for row in reader
        ]


def export_fields(disc, h: np.ndarray, out_dir, rows: list | None = None) -> list:
    """Write VTK files for the matrix and each fracture, plus an optional CSV.

    Returns the written paths.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    h_D, h_F = disc.system.full_heads(h)
    paths = [out / "matrix.vtk"]
    write_vtk_tet(disc.tet_mesh, h_D, paths[0])
    for i, (mesh, frac, hi) in enumerate(zip(disc.h_meshes, disc.network.fractures, h_F)):
        p = out / f"fracture_{i}.vtk"
        write_vtk_fracture(mesh, frac, hi, p)
        paths.append(p)
    if rows is not None:
        p = out / "convergence.csv"
        write_convergence_csv(rows, p)
        paths.append(p)
    return paths
