import numpy as np
import pytest

from dfmopt.errors import InvalidParameter
from dfmopt.geometry import FACES, Fracture, FractureNetwork, PorousDomain
from dfmopt.harness import generate_random_dfn
from dfmopt.mesh import (
    SegMesh,
    build_box_tet_mesh,
    build_dof_layout,
    build_fracture_tri_mesh,
    build_trace_mesh,
    read_tetmesh,
    read_trimesh,
    write_tetmesh,
    write_trimesh,
)
from dfmopt.model import Parameters, discretize

CUBE = PorousDomain([0, 0, 0], [1, 1, 1])
SQUARE = Fracture.from_vertices(0, [[0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0]])


def _signed_volumes(mesh):
    x = mesh.vertices[mesh.tets]
    return np.linalg.det(x[:, 1:] - x[:, :1]) / 6.0


@pytest.mark.parametrize("delta, count", [(1.0, 6), (0.5, 48)])
def test_box_mesh_counts_and_volume(delta, count):
    mesh = build_box_tet_mesh(CUBE, delta)
    assert mesh.n_tets == count
    assert abs(mesh.volumes.sum() - 1.0) < 1e-12


def test_box_mesh_positive_orientation_and_symmetric_neighbours():
    mesh = build_box_tet_mesh(PorousDomain([0, 0, 0], [1, 2, 0.7]), 0.3)
    assert np.all(_signed_volumes(mesh) > 0)
    for t in range(mesh.n_tets):
        for n in mesh.neighbors[t]:
            if n >= 0:
                assert t in mesh.neighbors[n]
    assert abs(mesh.volumes.sum() - 1.4) < 1e-10 * 1.4


def test_boundary_faces_tagged_on_one_box_face():
    dom = PorousDomain([-1, 0, 2], [1, 3, 4])
    mesh = build_box_tet_mesh(dom, 0.45)
    assert set(mesh.face_tags) == set(FACES)
    coords = mesh.vertices[mesh.boundary_faces]
    for tag, face in zip(mesh.face_tags, coords):
        axis = "xyz".index(tag[0])
        bound = dom.box_min[axis] if tag.endswith("min") else dom.box_max[axis]
        assert np.allclose(face[:, axis], bound)
    # every boundary face is flat on exactly one box face
    on = [sum(np.allclose(face[:, a], b) for a in range(3) for b in (dom.box_min[a], dom.box_max[a])) for face in coords]
    assert set(on) == {1}


def test_box_mesh_rejects_bad_delta():
    with pytest.raises(InvalidParameter):
        build_box_tet_mesh(CUBE, 0.0)


def test_unit_square_mesh():
    mesh = build_fracture_tri_mesh(SQUARE, 1.0)
    assert mesh.n_tris >= 2
    assert abs(mesh.areas.sum() - 1.0) < 1e-12


def test_refinement_count_ratio_and_angles():
    counts = [build_fracture_tri_mesh(SQUARE, d).n_tris for d in (0.5, 0.25, 0.125)]
    for a, b in zip(counts, counts[1:]):
        assert 3 <= b / a <= 6
    mesh = build_fracture_tri_mesh(SQUARE, 0.125)
    assert np.all(mesh.areas > 0)
    assert mesh.min_angle_deg() > 15


def test_general_polygon_mesh_covers_area():
    f = Fracture.from_vertices(0, [[0, 0, 0], [1, 0.2, 0.3], [0.8, 1.0, 0.5], [0.1, 0.7, 0.1]][:3])
    mesh = build_fracture_tri_mesh(f, 0.1)
    assert np.all(mesh.areas > 0)
    assert abs(mesh.areas.sum() - f.area) < 1e-10 * f.area


def test_boundary_edges_tagged_with_polygon_edges():
    mesh = build_fracture_tri_mesh(SQUARE, 0.25)
    assert set(mesh.edge_tags.tolist()) == {0, 1, 2, 3}
    for e, tag in zip(mesh.boundary_edges, mesh.edge_tags):
        p = mesh.vertices[e]
        a, b = SQUARE.polygon[tag], SQUARE.polygon[(tag + 1) % 4]
        d = (b - a) / np.linalg.norm(b - a)
        assert np.allclose((p - a) @ np.array([-d[1], d[0]]), 0, atol=1e-12)


def _line_trace(length):
    dom = PorousDomain([-1, -1, -1], [2, 2, 2])
    f0 = Fracture.from_vertices(0, [[0, 0, 0], [length, 0, 0], [length, 1, 0], [0, 1, 0]])
    f1 = Fracture.from_vertices(1, [[0, 0.5, -0.5], [length, 0.5, -0.5], [length, 0.5, 0.5], [0, 0.5, 0.5]])
    return FractureNetwork(dom, [f0, f1]).traces[0]


def test_trace_mesh_breaks():
    tr = _line_trace(1.0)
    assert np.allclose(build_trace_mesh(tr, 0, 0.3).param_breaks, [0, 0.25, 0.5, 0.75, 1])
    assert np.allclose(build_trace_mesh(tr, 1, 2.0).param_breaks, [0, 1])


def test_trace_meshes_independent_per_fracture():
    tr = _line_trace(1.0)
    a, b = build_trace_mesh(tr, 0, 0.3), build_trace_mesh(tr, 1, 0.3)
    assert a is not b and a.owner != b.owner
    with pytest.raises(InvalidParameter):
        build_trace_mesh(tr, 5, 0.3)


def test_segmesh_validation():
    with pytest.raises(InvalidParameter):
        SegMesh(np.array([0.0, 0.6, 0.5, 1.0]), (0, 0))


def test_dof_layout_table_identities():
    net = generate_random_dfn(2, 6)
    disc = discretize(net, Parameters(0.5, 0.5))
    lay = disc.layout
    assert lay.n_hF == sum(lay.n_hi)
    assert lay.n_q == sum(q.n_tris for q in disc.q_meshes)
    assert lay.n_u == sum(disc.seg_meshes[(k, m)].n_elements for m, tr in enumerate(net.traces) for k in tr.fracture_pair)
    assert lay.n_h == lay.n_hF + lay.n_hD
    assert lay.n_w == lay.n_q + lay.n_u
    assert lay.n_total == lay.n_h + lay.n_w
    for i in range(len(net.fractures)):
        R, Rp = lay.R(i), lay.R_plus(i)
        for S in (R, Rp):
            assert np.all(np.diff(S.indptr) == 1)
            assert np.all(S.data == 1)
        assert R.shape[0] == lay.n_ui(i) and Rp.shape[0] == lay.n_ui_plus(i)
        # gather-scatter round trip
        u = np.random.default_rng(i).normal(size=lay.n_u)
        assert np.allclose(R @ (R.T @ (R @ u)), R @ u)


def test_dof_layout_single_fracture_two_cells():
    q = build_fracture_tri_mesh(SQUARE, 1.0)
    lay = build_dof_layout(8, [4], [q], {}, [])
    assert lay.n_q == 2 and lay.n_u == 0


def test_trace_blocks_ordered_low_index_first():
    net = generate_random_dfn(2, 6)
    disc = discretize(net, Parameters(0.5, 0.5))
    lay = disc.layout
    for m, (i, j) in enumerate(lay.trace_pairs):
        assert i < j
        assert lay.u_offsets[(i, m)] < lay.u_offsets[(j, m)]


def test_text_mesh_round_trip(tmp_path):
    mesh = build_box_tet_mesh(CUBE, 1.0)
    write_tetmesh(mesh, tmp_path / "m.tet")
    back, tags = read_tetmesh(tmp_path / "m.tet", CUBE)
    assert back.n_vertices == mesh.n_vertices
    assert np.array_equal(back.tets, mesh.tets) and np.all(tags == 0)
    assert np.array_equal(back.vertices, mesh.vertices)
    tri = build_fracture_tri_mesh(SQUARE, 0.5)
    write_trimesh(tri, tmp_path / "m.tri", tags=np.arange(tri.n_tris))
    back, tags = read_trimesh(tmp_path / "m.tri", SQUARE)
    assert np.array_equal(back.vertices, tri.vertices)
    assert np.array_equal(tags, np.arange(tri.n_tris))
    assert np.array_equal(back.edge_tags, tri.edge_tags)
