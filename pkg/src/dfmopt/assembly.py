"""Finite-element matrices for the matrix, the fractures and their coupling.

Every routine here works on the full node sets of its meshes; Dirichlet
elimination happens once in :func:`build_system_blocks`.  Cross-mesh
integrals all go through :class:`~dfmopt.intersection.OverlapTable`
quadrature, which is exact for products of two linear functions.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.io
import scipy.sparse as sp

from .errors import SingularOperator
from .geometry import Dirichlet, Fracture, Neumann, PorousDomain, Trace, evaluate_value
from .intersection import InterfaceMesh, OverlapTable, segment_partition
from .mesh import DofLayout, SegMesh, TetMesh, TriMesh
from .quadrature import TRI_MIDPOINT_BARY, TRI_MIDPOINT_W, gauss_segment, tet_degree2


def _coo(rows, cols, vals, shape) -> sp.csr_matrix:
    m = sp.coo_matrix((np.ravel(vals), (np.ravel(rows), np.ravel(cols))), shape=shape).tocsr()
    m.sum_duplicates()
    m.eliminate_zeros()
    return m


def _pairwise(ids_a, ids_b, local):
    """COO triplets for per-item local blocks ``local[n, a, b]``."""
    na, nb = ids_a.shape[1], ids_b.shape[1]
    rows = np.repeat(ids_a[:, :, None], nb, axis=2)
    cols = np.repeat(ids_b[:, None, :], na, axis=1)
    return rows, cols, local


# ---------------------------------------------------------------------------
# Dirichlet data
# ---------------------------------------------------------------------------


@dataclass
class DirichletData:
    """Constrained nodes of one mesh and their prescribed values."""

    mask: np.ndarray
    values: np.ndarray

    @property
    def free(self) -> np.ndarray:
        return np.flatnonzero(~self.mask)

    @property
    def fixed(self) -> np.ndarray:
        return np.flatnonzero(self.mask)

    @property
    def n_free(self) -> int:
        return int((~self.mask).sum())

    def prolong(self, x_free: np.ndarray) -> np.ndarray:
        """Full nodal vector from free values plus the lift."""
        out = self.values.copy()
        out[self.free] = x_free
        return out


def dirichlet_tet(mesh: TetMesh, domain: PorousDomain) -> DirichletData:
    mask = np.zeros(mesh.n_vertices, dtype=bool)
    values = np.zeros(mesh.n_vertices)
    for name, bc in domain.face_bc.items():
        if not isinstance(bc, Dirichlet):
            continue
        nodes = np.unique(mesh.boundary_faces[mesh.face_tags == name])
        mask[nodes] = True
        values[nodes] = evaluate_value(bc.value, mesh.vertices[nodes])
    return DirichletData(mask, values)


def dirichlet_fracture(mesh: TriMesh, fracture: Fracture) -> DirichletData:
    mask = np.zeros(mesh.n_vertices, dtype=bool)
    values = np.zeros(mesh.n_vertices)
    for k, bc in enumerate(fracture.edge_bc):
        if not isinstance(bc, Dirichlet):
            continue
        nodes = np.unique(mesh.boundary_edges[mesh.edge_tags == k])
        if len(nodes) == 0:
            continue
        mask[nodes] = True
        values[nodes] = evaluate_value(bc.value, fracture.from_local(mesh.vertices[nodes]))
    return DirichletData(mask, values)


# ---------------------------------------------------------------------------
# Matrix domain
# ---------------------------------------------------------------------------


def tet_stiffness(mesh: TetMesh, K) -> sp.csr_matrix:
    g = mesh.gradients
    K = np.asarray(K, dtype=float)
    if K.ndim == 2:
        kg = np.einsum("ij,naj->nai", K, g)
    else:
        kg = np.einsum("nij,naj->nai", K, g)
    local = np.einsum("nai,nbi->nab", kg, g) * mesh.volumes[:, None, None]
    return _coo(*_pairwise(mesh.tets, mesh.tets, local), (mesh.n_vertices,) * 2)


def tet_load(mesh: TetMesh, source) -> np.ndarray:
    """``(f, phi_k)`` with a degree-2 rule."""
    if not callable(source) and float(source) == 0.0:
        return np.zeros(mesh.n_vertices)
    bary, w = tet_degree2()
    x = mesh.vertices[mesh.tets]
    pts = np.einsum("qa,nai->nqi", bary, x)
    fv = evaluate_value(source, pts.reshape(-1, 3)).reshape(len(x), -1)
    local = np.einsum("nq,q,qa->na", fv, w, bary) * mesh.volumes[:, None]
    return np.bincount(mesh.tets.ravel(), weights=local.ravel(), minlength=mesh.n_vertices)


def tet_neumann_load(mesh: TetMesh, domain: PorousDomain) -> np.ndarray:
    out = np.zeros(mesh.n_vertices)
    for name, bc in domain.face_bc.items():
        if not isinstance(bc, Neumann):
            continue
        if not callable(bc.value) and float(bc.value) == 0.0:
            continue
        faces = mesh.boundary_faces[mesh.face_tags == name]
        x = mesh.vertices[faces]
        area = 0.5 * np.linalg.norm(np.cross(x[:, 1] - x[:, 0], x[:, 2] - x[:, 0]), axis=1)
        pts = np.einsum("qa,nai->nqi", TRI_MIDPOINT_BARY, x)
        gv = evaluate_value(bc.value, pts.reshape(-1, 3)).reshape(len(x), -1)
        local = np.einsum("nq,q,qa->na", gv, TRI_MIDPOINT_W, TRI_MIDPOINT_BARY) * area[:, None]
        out += np.bincount(faces.ravel(), weights=local.ravel(), minlength=mesh.n_vertices)
    return out


def _interface_quadrature(tet_mesh: TetMesh, im: InterfaceMesh, fracture: Fracture):
    """Quadrature points on interface triangles with 3D basis values."""
    tris = im.triangles
    area = im.areas
    pts2 = np.einsum("qa,nai->nqi", TRI_MIDPOINT_BARY, tris).reshape(-1, 2)
    w = (area[:, None] * TRI_MIDPOINT_W[None, :]).ravel()
    tets = np.repeat(im.parent_tet, len(TRI_MIDPOINT_W))
    phi = tet_mesh.barycentric(tets, fracture.from_local(pts2))
    return tets, phi, w, pts2


def interface_mass(tet_mesh: TetMesh, im: InterfaceMesh, fracture: Fracture) -> sp.csr_matrix:
    """``G_D^i``: mass of 3D hat functions restricted to the fracture."""
    tets, phi, w, _ = _interface_quadrature(tet_mesh, im, fracture)
    ids = tet_mesh.tets[tets]
    local = phi[:, :, None] * phi[:, None, :] * w[:, None, None]
    return _coo(*_pairwise(ids, ids, local), (tet_mesh.n_vertices,) * 2)


def assemble_A_D(
    tet_mesh: TetMesh,
    interface_meshes: list,
    fractures: list,
    domain: PorousDomain,
    beta: float,
    dirichlet: DirichletData | None = None,
):
    """Stiffness plus ``beta``-weighted interface mass, with the load.

    Returns ``(A_D, b_D, A_full, load_full)`` where the first two are
    restricted to free nodes with the Dirichlet lift moved to the right.
    """
    if beta < 0:
        raise SingularOperator("beta must be non-negative")
    if beta == 0 and not domain.has_dirichlet():
        raise SingularOperator("beta = 0 needs a Dirichlet part of the box boundary")
    A = tet_stiffness(tet_mesh, domain.K)
    if beta > 0:
        for im, frac in zip(interface_meshes, fractures):
            A = A + beta * interface_mass(tet_mesh, im, frac)
    load = tet_load(tet_mesh, domain.source) + tet_neumann_load(tet_mesh, domain)
    dirichlet = dirichlet if dirichlet is not None else dirichlet_tet(tet_mesh, domain)
    A_red, b_red = eliminate(A, load, dirichlet)
    return A_red, b_red, A, load


def eliminate(A: sp.spmatrix, rhs: np.ndarray, dirichlet: DirichletData):
    f, d = dirichlet.free, dirichlet.fixed
    A = A.tocsr()
    A_ff = A[f][:, f].tocsr()
    b = rhs[f] - A[f][:, d] @ dirichlet.values[d]
    return A_ff, b


# ---------------------------------------------------------------------------
# Fractures
# ---------------------------------------------------------------------------


def tri_stiffness(mesh: TriMesh, K) -> sp.csr_matrix:
    g = mesh.gradients
    kg = np.einsum("ij,naj->nai", np.asarray(K, dtype=float), g)
    local = np.einsum("nai,nbi->nab", kg, g) * mesh.areas[:, None, None]
    return _coo(*_pairwise(mesh.tris, mesh.tris, local), (mesh.n_vertices,) * 2)


def tri_mass(mesh: TriMesh) -> sp.csr_matrix:
    ref = (np.ones((3, 3)) + np.eye(3)) / 12.0
    local = mesh.areas[:, None, None] * ref[None]
    return _coo(*_pairwise(mesh.tris, mesh.tris, local), (mesh.n_vertices,) * 2)


def fracture_load(mesh: TriMesh, fracture: Fracture) -> np.ndarray:
    """Source and Neumann edge contributions on one fracture."""
    out = np.zeros(mesh.n_vertices)
    src = fracture.source
    if callable(src) or float(src) != 0.0:
        pts = np.einsum("qa,nai->nqi", TRI_MIDPOINT_BARY, mesh.corners).reshape(-1, 2)
        fv = evaluate_value(src, fracture.from_local(pts)).reshape(mesh.n_tris, -1)
        local = np.einsum("nq,q,qa->na", fv, TRI_MIDPOINT_W, TRI_MIDPOINT_BARY) * mesh.areas[:, None]
        out += np.bincount(mesh.tris.ravel(), weights=local.ravel(), minlength=mesh.n_vertices)
    gx, gw = gauss_segment(2)
    for k, bc in enumerate(fracture.edge_bc):
        if not isinstance(bc, Neumann):
            continue
        if not callable(bc.value) and float(bc.value) == 0.0:
            continue
        edges = mesh.boundary_edges[mesh.edge_tags == k]
        if len(edges) == 0:
            continue
        x = mesh.vertices[edges]
        ln = np.linalg.norm(x[:, 1] - x[:, 0], axis=1)
        pts = x[:, None, 0, :] + gx[None, :, None] * (x[:, None, 1, :] - x[:, None, 0, :])
        gv = evaluate_value(bc.value, fracture.from_local(pts.reshape(-1, 2))).reshape(len(x), -1)
        basis = np.column_stack([1.0 - gx, gx])
        local = np.einsum("nq,q,qa->na", gv, gw, basis) * ln[:, None]
        out += np.bincount(edges.ravel(), weights=local.ravel(), minlength=mesh.n_vertices)
    return out


def assemble_A_F(
    h_meshes: list,
    fractures: list,
    trace_blocks: list,
    alpha: float,
    dirichlets: list | None = None,
) -> list:
    """Per-fracture ``A_i`` on all nodes: stiffness plus trace mass.

    Returns the list of full ``A_i``; :func:`build_system_blocks` restricts
    them.  Raises :class:`SingularOperator` for a fracture that has neither
    a Dirichlet edge nor (with ``alpha > 0``) a trace.
    """
    if alpha < 0:
        raise SingularOperator("alpha must be non-negative")
    out = []
    for i, (mesh, frac) in enumerate(zip(h_meshes, fractures)):
        A = tri_stiffness(mesh, frac.K)
        has_trace = False
        for tb in trace_blocks:
            if i in (tb.i, tb.j) and alpha > 0:
                A = A + alpha * tb.G[(i, i)]
                has_trace = True
        has_dir = dirichlets is not None and dirichlets[i].mask.any()
        if dirichlets is None:
            has_dir = any(isinstance(bc, Dirichlet) for bc in frac.edge_bc)
        if not (has_trace or has_dir):
            raise SingularOperator(f"fracture {frac.id}: no Dirichlet edge and no trace with alpha > 0")
        out.append(A.tocsr())
    return out


# ---------------------------------------------------------------------------
# Matrix-fracture coupling
# ---------------------------------------------------------------------------


@dataclass
class FractureCoupling:
    G_D: sp.csr_matrix
    G_DF: sp.csr_matrix
    G_F: sp.csr_matrix


def assemble_G_blocks(
    tet_mesh: TetMesh,
    im: InterfaceMesh,
    h_mesh: TriMesh,
    fracture: Fracture,
    table: OverlapTable,
) -> FractureCoupling:
    """``G_D^i``, ``G_DF^i`` and ``G_F^i`` for one fracture.

    ``table`` is the overlap of the interface mesh (cells a) with the
    fracture head mesh (cells b).
    """
    G_D = interface_mass(tet_mesh, im, fracture)
    G_F = tri_mass(h_mesh)
    tets = im.parent_tet[table.q_a]
    phi = tet_mesh.barycentric(tets, fracture.from_local(table.q_points))
    psi = h_mesh.barycentric(table.q_b, table.q_points)
    local = phi[:, :, None] * psi[:, None, :] * table.q_weights[:, None, None]
    G_DF = _coo(
        *_pairwise(tet_mesh.tets[tets], h_mesh.tris[table.q_b], local),
        (tet_mesh.n_vertices, h_mesh.n_vertices),
    )
    return FractureCoupling(G_D, G_DF, G_F)


def assemble_D_E(
    tet_mesh: TetMesh,
    im: InterfaceMesh,
    h_mesh: TriMesh,
    q_mesh: TriMesh,
    fracture: Fracture,
    q_h_table: OverlapTable,
    q_im_table: OverlapTable,
):
    """``D_i`` (head nodes x q cells) and ``E_i`` (3D nodes x q cells).

    ``q_h_table`` overlaps q cells (a) with head triangles (b);
    ``q_im_table`` overlaps q cells (a) with interface triangles (b).
    """
    psi = h_mesh.barycentric(q_h_table.q_b, q_h_table.q_points)
    rows = h_mesh.tris[q_h_table.q_b]
    cols = np.repeat(q_h_table.q_a[:, None], 3, axis=1)
    D = _coo(rows, cols, psi * q_h_table.q_weights[:, None], (h_mesh.n_vertices, q_mesh.n_tris))
    tets = im.parent_tet[q_im_table.q_b]
    phi = tet_mesh.barycentric(tets, fracture.from_local(q_im_table.q_points))
    rows = tet_mesh.tets[tets]
    cols = np.repeat(q_im_table.q_a[:, None], 4, axis=1)
    E = _coo(rows, cols, phi * q_im_table.q_weights[:, None], (tet_mesh.n_vertices, q_mesh.n_tris))
    return D, E


# ---------------------------------------------------------------------------
# Trace blocks
# ---------------------------------------------------------------------------


@dataclass
class TraceBlocks:
    """Line integrals on one trace between fractures ``i < j``.

    ``G[(a, b)]``, ``B[(a, b)]`` and ``C[(a, b)]`` hold ``G^m_ab``,
    ``B^m_ab`` and ``C^m_ab`` for ``a, b`` in ``(i, j)``.
    """

    m: int
    i: int
    j: int
    G: dict = field(default_factory=dict)
    B: dict = field(default_factory=dict)
    C: dict = field(default_factory=dict)
    partition: np.ndarray = None


def _merge_breaks(arrays, tol: float) -> np.ndarray:
    b = np.unique(np.concatenate(arrays + [np.array([0.0, 1.0])]))
    out = [b[0]]
    for t in b[1:]:
        if t - out[-1] > tol:
            out.append(t)
    out[-1] = 1.0
    return np.array(out)


def _owner(t0, t1, mids):
    idx = np.searchsorted(t0, mids, side="right") - 1
    ok = (idx >= 0) & (mids <= t1[np.clip(idx, 0, len(t1) - 1)])
    return np.where(ok, idx, -1)


def assemble_trace_blocks(
    trace: Trace,
    m: int,
    fractures: list,
    h_meshes: list,
    seg_meshes: dict,
    eps: float = 1e-9,
) -> TraceBlocks:
    """All ``G^m``, ``B^m``, ``C^m`` blocks of one trace.

    The trace parameter runs from ``endpoints3d[0]`` to ``endpoints3d[1]``
    for both fractures, so the three independent partitions of the trace
    (two head meshes and the trace meshes) are merged on a common axis.
    """
    i, j = trace.fracture_pair
    owners = (i, j)
    parts = {}
    for k in owners:
        a, b = fractures[k].to_local(trace.endpoints3d, eps=None)
        parts[k] = segment_partition(h_meshes[k].corners, a, b, eps)
    tol = eps / max(trace.length, eps)
    breaks = _merge_breaks(
        [parts[k][1] for k in owners] + [parts[k][2] for k in owners]
        + [seg_meshes[(k, m)].param_breaks for k in owners],
        tol,
    )
    t0, t1 = breaks[:-1], breaks[1:]
    mids = 0.5 * (t0 + t1)
    tri = {}
    elem = {}
    keep = np.ones(len(mids), dtype=bool)
    for k in owners:
        tri_k, s0, s1 = parts[k]
        idx = _owner(s0, s1, mids)
        keep &= idx >= 0
        tri[k] = np.where(idx >= 0, tri_k[np.clip(idx, 0, max(len(tri_k) - 1, 0))] if len(tri_k) else -1, -1)
        elem[k] = np.clip(np.searchsorted(seg_meshes[(k, m)].param_breaks, mids, side="right") - 1, 0, seg_meshes[(k, m)].n_elements - 1)
    t0, t1 = t0[keep], t1[keep]
    gx, gw = gauss_segment(2)
    tq = (t0[:, None] + (t1 - t0)[:, None] * gx[None, :]).ravel()
    wq = (trace.length * (t1 - t0)[:, None] * gw[None, :]).ravel()
    nq = len(gx)
    pts3 = trace.point(tq)
    psi, nodes, seg = {}, {}, {}
    for k in owners:
        tk = np.repeat(tri[k][keep], nq)
        loc = fractures[k].to_local(pts3, eps=None)
        psi[k] = h_meshes[k].barycentric(tk, loc)
        nodes[k] = h_meshes[k].tris[tk]
        seg[k] = np.repeat(elem[k][keep], nq)
    out = TraceBlocks(m, i, j, partition=np.column_stack([t0, t1]))
    for a in owners:
        na = h_meshes[a].n_vertices
        ua = seg_meshes[(a, m)].n_elements
        for b in owners:
            nb = h_meshes[b].n_vertices
            ub = seg_meshes[(b, m)].n_elements
            local = psi[a][:, :, None] * psi[b][:, None, :] * wq[:, None, None]
            out.G[(a, b)] = _coo(*_pairwise(nodes[a], nodes[b], local), (na, nb))
            out.B[(a, b)] = _coo(
                nodes[a], np.repeat(seg[b][:, None], 3, axis=1), psi[a] * wq[:, None], (na, ub)
            )
            out.C[(a, b)] = _coo(seg[a], seg[b], wq, (ua, ub))
    return out


# ---------------------------------------------------------------------------
# Global functional matrix
# ---------------------------------------------------------------------------


def assemble_global_G(
    couplings: list, trace_blocks: list, n_D: int, n_F: list, alpha: float
) -> sp.csr_matrix:
    """Functional matrix on all head nodes, ordered ``[h_D; h_1; ...]``.

    ``[h_D; h_F]^T G [h_D; h_F]`` collects the matrix-fracture mismatch,
    the trace mismatch and the ``alpha^2`` part of the flux-balance term.
    """
    nf = len(n_F)
    G_D = sp.csr_matrix((n_D, n_D))
    for c in couplings:
        G_D = G_D + c.G_D
    G_DF = sp.hstack([c.G_DF for c in couplings], format="csr") if nf else sp.csr_matrix((n_D, 0))
    blocks = [[None] * nf for _ in range(nf)]
    for k, c in enumerate(couplings):
        blocks[k][k] = c.G_F.copy()
    a2 = alpha * alpha
    for tb in trace_blocks:
        i, j = tb.i, tb.j
        blocks[i][i] = blocks[i][i] + (1.0 + a2) * tb.G[(i, i)]
        blocks[j][j] = blocks[j][j] + (1.0 + a2) * tb.G[(j, j)]
        for a, b in ((i, j), (j, i)):
            term = (a2 - 1.0) * tb.G[(a, b)]
            blocks[a][b] = term if blocks[a][b] is None else blocks[a][b] + term
    for a in range(nf):
        for b in range(nf):
            if blocks[a][b] is None:
                blocks[a][b] = sp.csr_matrix((n_F[a], n_F[b]))
    G_FF = sp.bmat(blocks, format="csr") if nf else sp.csr_matrix((0, 0))
    G = sp.bmat([[G_D, -G_DF], [-G_DF.T, G_FF]], format="csr")
    G.eliminate_zeros()
    return G


def assemble_B_plus(trace_blocks: list, n_F: list, layout_u: dict, n_u: int) -> sp.csr_matrix:
    """``B^+`` on all fracture head nodes: rows ``h_F``, columns ``u``.

    ``layout_u[(k, m)]`` is the column offset of ``u_k^m``.
    """
    offs = np.concatenate([[0], np.cumsum(n_F)]).astype(int)
    rows, cols, vals = [], [], []
    for tb in trace_blocks:
        for a in (tb.i, tb.j):
            for b in (tb.i, tb.j):
                blk = tb.B[(a, b)].tocoo()
                rows.append(blk.row + offs[a])
                cols.append(blk.col + layout_u[(b, tb.m)])
                vals.append(blk.data)
    if not rows:
        return sp.csr_matrix((int(offs[-1]), n_u))
    return _coo(np.concatenate(rows), np.concatenate(cols), np.concatenate(vals), (int(offs[-1]), n_u))


def assemble_B(trace_blocks: list, n_F: list, layout_u: dict, n_u: int) -> sp.csr_matrix:
    """``B`` on all fracture head nodes: only the ``B^m_ii`` blocks."""
    offs = np.concatenate([[0], np.cumsum(n_F)]).astype(int)
    rows, cols, vals = [], [], []
    for tb in trace_blocks:
        for a in (tb.i, tb.j):
            blk = tb.B[(a, a)].tocoo()
            rows.append(blk.row + offs[a])
            cols.append(blk.col + layout_u[(a, tb.m)])
            vals.append(blk.data)
    if not rows:
        return sp.csr_matrix((int(offs[-1]), n_u))
    return _coo(np.concatenate(rows), np.concatenate(cols), np.concatenate(vals), (int(offs[-1]), n_u))


def assemble_C(trace_blocks: list, layout_u: dict, n_u: int) -> sp.csr_matrix:
    rows, cols, vals = [], [], []
    for tb in trace_blocks:
        for a in (tb.i, tb.j):
            for b in (tb.i, tb.j):
                blk = tb.C[(a, b)].tocoo()
                rows.append(blk.row + layout_u[(a, tb.m)])
                cols.append(blk.col + layout_u[(b, tb.m)])
                vals.append(blk.data)
    if not rows:
        return sp.csr_matrix((n_u, n_u))
    return _coo(np.concatenate(rows), np.concatenate(cols), np.concatenate(vals), (n_u, n_u))


# ---------------------------------------------------------------------------
# Reduced system
# ---------------------------------------------------------------------------


@dataclass(eq=False)
class SystemBlocks:
    """All operators of the constrained problem on free unknowns.

    Heads are ordered ``h = [h_D; h_F]`` and controls ``w = [q; u]``.  The
    functional reads
    ``J = h'Gh + w'Cw + 2h'B+w + 2c_h'h + 2c_w'w + c0``
    and the constraints ``A h - B w = b`` with the block operators built on
    demand by the solver from the pieces stored here.
    """

    layout: DofLayout
    alpha: float
    beta: float
    A_D: sp.csr_matrix
    A_F: list
    G_DF: sp.csr_matrix
    B: sp.csr_matrix
    B_plus: sp.csr_matrix
    C: sp.csr_matrix
    D: sp.csr_matrix
    E: sp.csr_matrix
    G: sp.csr_matrix
    b_D: np.ndarray
    b_F: np.ndarray
    c_h: np.ndarray
    c_w: np.ndarray
    c0: float
    dir_D: DirichletData
    dir_F: list
    G_full: sp.csr_matrix = None
    B_plus_full: sp.csr_matrix = None

    @property
    def n_D(self) -> int:
        return self.A_D.shape[0]

    @property
    def n_F(self) -> int:
        return self.B.shape[0]

    @property
    def n_q(self) -> int:
        return self.E.shape[1]

    @property
    def n_u(self) -> int:
        return self.B.shape[1]

    @property
    def n_h(self) -> int:
        return self.n_D + self.n_F

    @property
    def n_w(self) -> int:
        return self.n_q + self.n_u

    @property
    def b(self) -> np.ndarray:
        return np.concatenate([self.b_D, self.b_F])

    @property
    def A_F_matrix(self) -> sp.csr_matrix:
        return sp.block_diag(self.A_F, format="csr") if self.A_F else sp.csr_matrix((0, 0))

    def A_matrix(self) -> sp.csr_matrix:
        return sp.bmat(
            [[self.A_D, None], [-self.beta * self.G_DF.T, self.A_F_matrix]], format="csr"
        )

    def Bcal(self) -> sp.csr_matrix:
        zero = sp.csr_matrix((self.n_D, self.n_u))
        return sp.bmat([[self.E, zero], [-self.D, self.B]], format="csr")

    def Bcal_plus(self) -> sp.csr_matrix:
        top = sp.csr_matrix((self.n_D, self.n_w))
        bottom = sp.hstack([sp.csr_matrix((self.n_F, self.n_q)), -self.alpha * self.B_plus], format="csr")
        return sp.vstack([top, bottom], format="csr")

    def Ccal(self) -> sp.csr_matrix:
        return sp.block_diag([sp.csr_matrix((self.n_q, self.n_q)), self.C], format="csr")

    def full_heads(self, h: np.ndarray):
        """Nodal head vectors on all nodes (Dirichlet values restored)."""
        h_D = self.dir_D.prolong(h[: self.n_D])
        out_F = []
        pos = self.n_D
        for d in self.dir_F:
            out_F.append(d.prolong(h[pos : pos + d.n_free]))
            pos += d.n_free
        return h_D, out_F

    def functional(self, h: np.ndarray, w: np.ndarray) -> float:
        """Matrix form of the mismatch functional."""
        val = (
            h @ (self.G @ h)
            + w @ (self.Ccal() @ w)
            + 2.0 * h @ (self.Bcal_plus() @ w)
            + 2.0 * self.c_h @ h
            + 2.0 * self.c_w @ w
            + self.c0
        )
        return float(val)


def _selection(n_full: int, idx: np.ndarray) -> sp.csr_matrix:
    return sp.csr_matrix((np.ones(len(idx)), (idx, np.arange(len(idx)))), shape=(n_full, len(idx)))


def build_system_blocks(
    layout: DofLayout,
    alpha: float,
    beta: float,
    A_D_full: sp.csr_matrix,
    load_D: np.ndarray,
    A_F_full: list,
    load_F: list,
    couplings: list,
    trace_blocks: list,
    D_list: list,
    E_list: list,
    dir_D: DirichletData,
    dir_F: list,
) -> SystemBlocks:
    """Eliminate Dirichlet nodes and gather the global operators."""
    n_D_full = len(dir_D.mask)
    n_F_full = [len(d.mask) for d in dir_F]
    fD, dD = dir_D.free, dir_D.fixed
    A_D, b_D = eliminate(A_D_full, load_D, dir_D)
    A_F, b_F = [], []
    for i, (A, load, d) in enumerate(zip(A_F_full, load_F, dir_F)):
        Ai, bi = eliminate(A, load, d)
        GDF = couplings[i].G_DF.tocsr()
        bi = bi + beta * (GDF[dD][:, d.free].T @ dir_D.values[dD])
        A_F.append(Ai)
        b_F.append(bi)
    b_F = np.concatenate(b_F) if b_F else np.zeros(0)

    n_u = layout.n_u
    G_DF_full = sp.hstack([c.G_DF for c in couplings], format="csr") if couplings else sp.csr_matrix((n_D_full, 0))
    P_F = sp.block_diag([_selection(n, d.free) for n, d in zip(n_F_full, dir_F)], format="csr") if dir_F else sp.csr_matrix((0, 0))
    P_D = _selection(n_D_full, fD)
    G_DF = (P_D.T @ G_DF_full @ P_F).tocsr()

    B_full = assemble_B(trace_blocks, n_F_full, layout.u_offsets, n_u)
    Bp_full = assemble_B_plus(trace_blocks, n_F_full, layout.u_offsets, n_u)
    C = assemble_C(trace_blocks, layout.u_offsets, n_u)
    D_full = sp.block_diag(D_list, format="csr") if D_list else sp.csr_matrix((0, 0))
    E_full = sp.hstack(E_list, format="csr") if E_list else sp.csr_matrix((n_D_full, 0))
    B = (P_F.T @ B_full).tocsr()
    B_plus = (P_F.T @ Bp_full).tocsr()
    D = (P_F.T @ D_full).tocsr()
    E = (P_D.T @ E_full).tocsr()

    G_full = assemble_global_G(couplings, trace_blocks, n_D_full, n_F_full, alpha)
    P = sp.block_diag([P_D, P_F], format="csr")
    x_dir = np.concatenate([dir_D.values] + [d.values for d in dir_F])
    G = (P.T @ G_full @ P).tocsr()
    Gx = G_full @ x_dir
    c_h = P.T @ Gx
    c0 = float(x_dir @ Gx)
    xF_dir = x_dir[n_D_full:]
    c_u = -alpha * (Bp_full.T @ xF_dir)
    c_w = np.concatenate([np.zeros(layout.n_q), c_u])
    return SystemBlocks(
        layout, alpha, beta, A_D, A_F, G_DF, B, B_plus, C, D, E, G,
        b_D, b_F, c_h, c_w, c0, dir_D, dir_F, G_full, Bp_full,
    )


def export_matrix_market(matrix: sp.spmatrix, path) -> None:
    """Write ``matrix`` in Matrix Market coordinate (general) format."""
    scipy.io.mmwrite(str(path), sp.coo_matrix(matrix), field="real", symmetry="general")
