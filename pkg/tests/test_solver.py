import io
import re

import numpy as np
import pytest

from dfmopt.errors import InvalidParameter, MaxIterReached
from dfmopt.geometry import Dirichlet, Fracture, FractureNetwork, PorousDomain
from dfmopt.harness import cross_cutting_divisions, problem2_setup
from dfmopt.model import Parameters, discretize
from dfmopt.oracles import crossing_network, gradient_check, gradient_instance, spd_probe
from dfmopt.solver import (
    ReducedProblem,
    apply_reduced_hessian,
    constraint_residuals,
    kkt_matrix,
    reduced_cg,
    solve_kkt_direct,
)


@pytest.fixture(scope="module")
def problem():
    disc = discretize(crossing_network(2, True), Parameters(0.34, 0.3, alpha=0.5, beta=2.0))
    return ReducedProblem(disc.system)


@pytest.fixture(scope="module")
def dense(problem):
    return problem.dense_hessian()


def test_apply_zero_is_zero(problem):
    assert np.all(apply_reduced_hessian(problem, np.zeros(problem.n_w)) == 0)


def test_hessian_product_is_linear_and_symmetric(problem, dense):
    rng = np.random.default_rng(0)
    x, y = rng.normal(size=(2, problem.n_w))
    assert np.allclose(problem.apply(2 * x - y), 2 * problem.apply(x) - problem.apply(y), rtol=1e-10, atol=1e-14)
    assert np.abs(dense - dense.T).max() <= 1e-10 * np.abs(dense).max()


def test_hessian_matches_explicit_schur_complement(problem, dense):
    s = problem.system
    A = s.A_matrix().toarray()
    X = np.linalg.solve(A, s.Bcal().toarray())
    Bp, C, G = s.Bcal_plus().toarray(), s.Ccal().toarray(), s.G.toarray()
    explicit = X.T @ G @ X + C + X.T @ Bp + Bp.T @ X
    assert np.abs(dense - explicit).max() <= 1e-9 * np.abs(explicit).max()


def test_hessian_positive_definite(problem, dense):
    assert spd_probe(problem, n=50) > 0
    assert np.linalg.eigvalsh(0.5 * (dense + dense.T)).min() > 0


def test_gradient_matches_finite_differences(problem):
    assert gradient_check(problem) <= 1e-5


def _homogeneous_network():
    dom = PorousDomain([0, 0, 0], [1, 1, 1], face_bc={"zmin": Dirichlet(0.0), "zmax": Dirichlet(0.0)})
    f0 = Fracture.from_vertices(0, [[0.1, 0.1, 0.5], [0.9, 0.1, 0.5], [0.9, 0.9, 0.5], [0.1, 0.9, 0.5]])
    f1 = Fracture.from_vertices(1, [[0.5, 0.2, 0.2], [0.5, 0.8, 0.2], [0.5, 0.8, 0.8], [0.5, 0.2, 0.8]])
    return FractureNetwork(dom, [f0, f1])


def test_zero_data_gives_zero_solution_immediately():
    disc = discretize(_homogeneous_network(), Parameters(0.5, 0.5))
    w, h, rep = reduced_cg(disc.system)
    assert rep.iterations == 0 and rep.converged
    assert not w.any() and not h.any()
    assert rep.functional == 0.0


@pytest.fixture(scope="module")
def tiny():
    return gradient_instance()


def _problem2(delta_D, delta_F, gamma_ratio):
    s = problem2_setup()
    params = Parameters(delta_D, delta_F, gamma_ratio=gamma_ratio,
                        tet_divisions=cross_cutting_divisions(s.domain, delta_D))
    return ReducedProblem(discretize(s.network, params).system)


def test_cg_finite_termination():
    two = _problem2(0.25, 0.5, 2.0)
    _, _, rep = reduced_cg(two, tol=1e-300, max_iter=two.n_w)
    assert two.n_w == 2 and rep.relative_residual < 1e-12
    # eight controls, condition number ~86: roundoff leaves ~1e-8 after n_w
    # steps and two more steps reach machine precision
    eight = _problem2(0.125, 0.125, 4.0)
    _, _, rep = reduced_cg(eight, tol=1e-300, max_iter=eight.n_w + 2)
    assert eight.n_w == 8 and rep.relative_residual < 1e-12


def test_cg_small_instance_converges(tiny):
    _, _, rep = reduced_cg(tiny, tol=1e-10, max_iter=10 * tiny.n_w)
    assert rep.converged and rep.iterations <= tiny.n_w + 2


def test_cg_monotone_on_ill_conditioned_instance(problem):
    # condition number ~1.5e6: roundoff delays but does not prevent termination
    _, _, rep = reduced_cg(problem, tol=1e-10, max_iter=10 * problem.n_w)
    assert rep.converged and rep.iterations <= 3 * problem.n_w
    assert all(c > 0 for c in rep.curvatures)
    # the functional never increases along CG iterates
    fh = np.array(rep.functional_history)
    assert np.all(np.diff(fh) <= 1e-12 * max(abs(fh[0]), 1.0))


def test_cg_agrees_with_kkt(problem):
    s = problem.system
    h_k, w_k, lam_k = solve_kkt_direct(s)
    w_c, h_c, rep = reduced_cg(problem, tol=1e-13, max_iter=20 * problem.n_w)
    assert np.linalg.norm(w_c - w_k) <= 1e-7 * np.linalg.norm(w_k)
    assert np.linalg.norm(h_c - h_k) <= 1e-7 * np.linalg.norm(h_k)
    lam_c = problem.multiplier(h_c, w_c)
    assert np.linalg.norm(lam_c - lam_k) <= 1e-6 * np.linalg.norm(lam_k)
    for h, w in ((h_k, w_k), (h_c, w_c)):
        rD, rF = constraint_residuals(s, h, w)
        assert rD <= 1e-10 and rF <= 1e-10
    assert abs(rep.functional - s.functional(h_k, w_k)) <= 1e-8 * max(rep.functional, 1e-12)


def test_kkt_matrix_symmetric(problem):
    M = kkt_matrix(problem.system)
    assert abs(M - M.T).max() <= 1e-14


def test_kkt_cap():
    disc = discretize(crossing_network(2), Parameters(0.25, 0.25))
    with pytest.raises(InvalidParameter):
        solve_kkt_direct(disc.system, cap=10)


def test_lagged_variant_runs(problem):
    w, h, rep = reduced_cg(problem, tol=1e-8, max_iter=200, variant="beta_lagged")
    assert rep.variant == "beta_lagged"
    assert len(rep.residual_history) == rep.iterations + 1
    assert np.all(np.isfinite(w)) and np.all(np.isfinite(h))


def test_max_iter_reached(problem):
    _, _, rep = reduced_cg(problem, tol=1e-14, max_iter=2)
    assert not rep.converged and rep.iterations == 2
    with pytest.raises(MaxIterReached):
        reduced_cg(problem, tol=1e-14, max_iter=2, raise_on_max_iter=True)


def test_invalid_arguments(problem):
    with pytest.raises(InvalidParameter):
        reduced_cg(problem, tol=0.0)
    with pytest.raises(InvalidParameter):
        reduced_cg(problem, variant="jacobi")


def test_restart_option_still_converges(tiny):
    _, _, rep = reduced_cg(tiny, tol=1e-10, max_iter=100 * tiny.n_w, restart=3)
    assert rep.converged


def test_verbose_log_format(problem):
    buf = io.StringIO()
    _, _, rep = reduced_cg(problem, tol=1e-6, verbose=True, log=buf)
    lines = buf.getvalue().splitlines()
    assert len(lines) == rep.iterations
    pattern = re.compile(r"^iter \d+ residual \S+ functional \S+$")
    assert all(pattern.match(ln) for ln in lines)


def test_report_bookkeeping(problem):
    _, _, rep = reduced_cg(problem, tol=1e-8)
    lay = problem.system.layout
    assert rep.n_unknowns == lay.n_total == lay.n_h + lay.n_q + lay.n_u
    assert rep.relative_residual <= 1e-8
    assert rep.functional >= 0
    assert {"setup", "cg"} <= set(rep.timings)
