import numpy as np
import pytest

from dfmopt.errors import DegenerateFit
from dfmopt.geometry import Fracture, PorousDomain
from dfmopt.harness import problem1_setup, problem2_setup
from dfmopt.mesh import build_box_tet_mesh, build_fracture_tri_mesh
from dfmopt.model import Parameters, discretize
from dfmopt.postprocess import (
    CSV_HEADER,
    AnalyticSolution,
    ConvergenceRow,
    ErrorNorms,
    cut_subcells,
    error_norms,
    export_fields,
    fit_rates,
    fit_slope,
    fracture_errors,
    matrix_errors,
    read_convergence_csv,
    write_convergence_csv,
)

COEF = np.array([0.5, -1.0, 2.0])


def _linear(p):
    return 0.3 + np.atleast_2d(p) @ COEF


def _linear_grad(p):
    return np.tile(COEF, (len(np.atleast_2d(p)), 1))


LINEAR = AnalyticSolution(_linear, _linear_grad)
CUBE = PorousDomain([0, 0, 0], [1, 1, 1])
TILTED = Fracture.from_vertices(0, [[0, 0, 0.2], [1, 0, 0.4], [1, 1, 0.6], [0, 1, 0.4]])


def test_linear_field_is_reproduced_exactly():
    mesh = build_box_tet_mesh(CUBE, 0.34)
    l2, h1 = matrix_errors(mesh, _linear(mesh.vertices), LINEAR, [(TILTED.frame.origin, TILTED.normal)])
    assert l2 < 1e-14 and h1 < 1e-13
    tri = build_fracture_tri_mesh(TILTED, 0.2)
    l2, h1 = fracture_errors([tri], [TILTED], [_linear(TILTED.from_local(tri.vertices))], LINEAR)
    assert l2 < 1e-14 and h1 < 1e-13


def test_unit_offset_gives_unit_l2_error():
    mesh = build_box_tet_mesh(CUBE, 0.5)
    l2, h1 = matrix_errors(mesh, _linear(mesh.vertices) + 1.0, LINEAR)
    assert abs(l2 - 1.0) < 1e-13 and h1 < 1e-13
    # unit gradient error over unit volume
    l2, h1 = matrix_errors(mesh, _linear(mesh.vertices) + mesh.vertices[:, 0], LINEAR)
    assert abs(h1 - 1.0) < 1e-13
    assert abs(l2 - np.sqrt(1 / 3)) < 1e-13


def test_cut_subcells_partition_parent_volume():
    mesh = build_box_tet_mesh(CUBE, 0.34)
    planes = [(TILTED.frame.origin, TILTED.normal)]
    parents, subs, cut = cut_subcells(mesh, planes, 1e-9)
    assert cut.any()
    assert set(parents.tolist()) == set(np.flatnonzero(cut).tolist())
    vol = np.abs(np.linalg.det(subs[:, 1:] - subs[:, :1])) / 6.0
    per_parent = np.bincount(parents, weights=vol, minlength=mesh.n_tets)
    assert np.allclose(per_parent[cut], mesh.volumes[cut], rtol=1e-12)
    # no sub-cell straddles the plane
    d = (subs - planes[0][0]) @ planes[0][1]
    assert np.all((d.max(axis=1) < 1e-9) | (d.min(axis=1) > -1e-9))


@pytest.fixture(scope="module")
def p1_disc():
    setup = problem1_setup()
    return setup, discretize(setup.network, Parameters(0.25, 0.25, tet_divisions=(4, 4, 5)))


def _interpolant(disc, setup):
    s = disc.system
    h_D = setup.exact.value(disc.tet_mesh.vertices)[s.dir_D.free]
    fr = disc.network.fractures[0]
    h_F = setup.exact.value(fr.from_local(disc.h_meshes[0].vertices))[s.dir_F[0].free]
    return np.concatenate([h_D, h_F])


def test_split_matters_only_for_kinked_solutions(p1_disc):
    setup, disc = p1_disc
    h = _interpolant(disc, setup)
    split = error_norms(disc, h, setup.exact, split=True)
    whole = error_norms(disc, h, setup.exact, split=False)
    assert abs(split.L2_D - whole.L2_D) > 1e-3 * whole.L2_D
    p2 = problem2_setup()
    disc2 = discretize(p2.network, Parameters(0.25, 0.25, tet_divisions=(4, 4, 5)))
    h2 = _interpolant(disc2, p2)
    a = error_norms(disc2, h2, p2.exact, split=True)
    b = error_norms(disc2, h2, p2.exact, split=False)
    assert abs(a.L2_D - b.L2_D) < 1e-12 and abs(a.H1_D - b.H1_D) < 1e-12


def test_full_norm_combines_parts():
    e = ErrorNorms(3.0, 4.0, 0.6, 0.8)
    assert e.H1full_D == 5.0 and abs(e.H1full_F - 1.0) < 1e-15


def test_fit_slope_synthetic():
    d = np.array([0.25, 0.125, 0.0625, 0.03125])
    assert abs(fit_slope(d, 3.0 * d**2) - 2.0) < 1e-12
    rows = [ConvergenceRow(k, dk, 2 * dk, dk**2, dk, 0.5 * dk**2, 2 * dk, 10, dk**3) for k, dk in enumerate(d)]
    rates = fit_rates(rows)
    assert set(rates) == {"errL2_D", "errH1_D", "errL2_F", "errH1_F"}
    assert np.allclose([rates["errL2_D"], rates["errH1_D"], rates["errL2_F"], rates["errH1_F"]], [2, 1, 2, 1])


def test_fit_degenerate_cases():
    d = [0.25, 0.125, 0.0625]
    with pytest.raises(DegenerateFit):
        fit_slope(d, [1e-3, 0.0, 1e-5])
    with pytest.raises(DegenerateFit):
        fit_rates([ConvergenceRow(0, 0.1, 0.1, 1, 1, 1, 1, 1, 0.0)] * 2)


def test_convergence_csv_round_trip(tmp_path):
    rows = [ConvergenceRow(k, 0.25 / 2**k, 0.5 / 2**k, 0.1 / 3**k, 0.2, 1e-7, np.float64(0.4), 7 + k, 1e-20) for k in range(3)]
    path = tmp_path / "c.csv"
    write_convergence_csv(rows, path)
    assert path.read_text().splitlines()[0] == ",".join(CSV_HEADER)
    assert read_convergence_csv(path) == rows


def _read_vtk(path):
    lines = path.read_text().splitlines()
    npts = int(lines[4].split()[1])
    pts = np.array([[float(v) for v in ln.split()] for ln in lines[5 : 5 + npts]])
    start = lines.index("LOOKUP_TABLE default") + 1
    vals = np.array([float(v) for v in lines[start : start + npts]])
    return pts, vals


def test_vtk_export(tmp_path, p1_disc):
    setup, disc = p1_disc
    h = _interpolant(disc, setup)
    paths = export_fields(disc, h, tmp_path, rows=[])
    assert [p.name for p in paths] == ["matrix.vtk", "fracture_0.vtk", "convergence.csv"]
    pts, vals = _read_vtk(paths[0])
    assert np.array_equal(pts, disc.tet_mesh.vertices)
    assert np.allclose(vals, setup.exact.value(pts), atol=1e-14)
    pts, vals = _read_vtk(paths[1])
    assert np.allclose(vals, setup.exact.value(pts), atol=1e-14)
