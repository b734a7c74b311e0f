"""Reduced conjugate gradient on the control variables and a KKT oracle.

Eliminating the heads through the constraint ``A h = B w + b`` turns the
constrained minimisation into the unconstrained quadratic problem

    J*(w) = w' Gr w + 2 g' w + J_b,

whose Hessian ``Gr`` is applied matrix-free with one forward and one
transposed block-triangular solve.  ``A`` is lower block triangular with
diagonal blocks ``A_D`` and ``A_F = diag(A_i)``, so each application costs
two solves with ``A_D`` and two with every ``A_i``.
"""
from __future__ import annotations

import sys
import time
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .assembly import SystemBlocks
from .errors import (
    InnerSolveFailure,
    InvalidParameter,
    MaxIterReached,
    NonPositiveCurvature,
    SingularMatrix,
)
from .model import parallel_map

VARIANTS = ("coupled", "beta_lagged")


class _Factor:
    """Sparse LU of an SPD block with a residual check on every solve."""

    def __init__(self, A: sp.spmatrix, tol: float):
        self.A = A.tocsr()
        self.n = A.shape[0]
        self.tol = tol
        if self.n:
            try:
                self.lu = splu(A.tocsc(), permc_spec="MMD_AT_PLUS_A", diag_pivot_thresh=0.0)
            except RuntimeError as exc:
                raise InnerSolveFailure(f"factorisation failed: {exc}") from None

    def solve(self, r: np.ndarray) -> np.ndarray:
        if self.n == 0:
            return np.zeros(0)
        nr = np.linalg.norm(r)
        if nr == 0.0:
            return np.zeros_like(r)
        x = self.lu.solve(r)
        for _ in range(3):
            res = r - self.A @ x
            if np.linalg.norm(res) <= self.tol * nr:
                return x
            x = x + self.lu.solve(res)
        res = np.linalg.norm(r - self.A @ x) / nr
        if res > self.tol:
            raise InnerSolveFailure(f"inner solve residual {res:.2e} above {self.tol:.0e}")
        return x


class InnerSolvers:
    """Factorisations of ``A_D`` and of each fracture block ``A_i``."""

    def __init__(self, system: SystemBlocks, tol: float = 1e-12):
        self.system = system
        self.beta = system.beta
        self.D = _Factor(system.A_D, tol)
        self.F = [_Factor(A, tol) for A in system.A_F]
        sizes = [A.shape[0] for A in system.A_F]
        self.offsets = np.concatenate([[0], np.cumsum(sizes)]).astype(int)
        self.G_DF = system.G_DF.tocsr()
        self.G_DF_T = self.G_DF.T.tocsr()

    def solve_D(self, r):
        return self.D.solve(r)

    def solve_F(self, r):
        o = self.offsets
        parts = parallel_map(lambda i: self.F[i].solve(r[o[i] : o[i + 1]]), range(len(self.F)))
        return np.concatenate(parts) if parts else np.zeros(0)

    def apply_Ainv(self, r: np.ndarray) -> np.ndarray:
        nD = self.system.n_D
        hD = self.solve_D(r[:nD])
        hF = self.solve_F(r[nD:] + self.beta * (self.G_DF_T @ hD))
        return np.concatenate([hD, hF])

    def apply_AinvT(self, r: np.ndarray) -> np.ndarray:
        nD = self.system.n_D
        lF = self.solve_F(r[nD:])
        lD = self.solve_D(r[:nD] + self.beta * (self.G_DF @ lF))
        return np.concatenate([lD, lF])


class ReducedProblem:
    """Operators of the reduced problem ``Gr w + g = 0``."""

    def __init__(self, system: SystemBlocks, inner_tol: float = 1e-12):
        t0 = time.perf_counter()
        self.system = system
        self.inner = InnerSolvers(system, inner_tol)
        self.Bcal = system.Bcal()
        self.BcalT = self.Bcal.T.tocsr()
        self.Bp = system.Bcal_plus()
        self.BpT = self.Bp.T.tocsr()
        self.Ccal = system.Ccal()
        self.G = system.G
        self.b = system.b
        self.h_b = self.inner.apply_Ainv(self.b)
        lam = self.inner.apply_AinvT(self.G @ self.h_b + system.c_h)
        self.g = self.BcalT @ lam + self.BpT @ self.h_b + system.c_w
        self.J_b = float(self.h_b @ (self.G @ self.h_b) + 2.0 * system.c_h @ self.h_b + system.c0)
        self.setup_time = time.perf_counter() - t0

    @property
    def n_w(self) -> int:
        return self.system.n_w

    def apply(self, d: np.ndarray) -> np.ndarray:
        hb = self.inner.apply_Ainv(self.Bcal @ d)
        lam = self.inner.apply_AinvT(self.G @ hb + self.Bp @ d)
        return self.BcalT @ lam + self.Ccal @ d + self.BpT @ hb

    def heads(self, w: np.ndarray) -> np.ndarray:
        return self.inner.apply_Ainv(self.Bcal @ w + self.b)

    def multiplier(self, h: np.ndarray, w: np.ndarray) -> np.ndarray:
        return -self.inner.apply_AinvT(self.G @ h + self.Bp @ w + self.system.c_h)

    def functional(self, w: np.ndarray) -> float:
        """``J*`` evaluated through the heads (no quadratic shortcut)."""
        return self.system.functional(self.heads(w), w)

    def gradient(self, w: np.ndarray) -> np.ndarray:
        return 2.0 * (self.apply(w) + self.g)

    def dense_hessian(self) -> np.ndarray:
        n = self.n_w
        out = np.empty((n, n))
        for k in range(n):
            e = np.zeros(n)
            e[k] = 1.0
            out[:, k] = self.apply(e)
        return out


def apply_reduced_hessian(problem: ReducedProblem, d: np.ndarray) -> np.ndarray:
    """``Gr d`` without forming ``Gr``."""
    return problem.apply(np.asarray(d, dtype=float))


class _LaggedOperator:
    """Hessian product with the matrix-fracture coupling lagged by one step.

    The fracture solves use the matrix part of the previous direction and
    the matrix transposed solve uses the previous fracture multiplier, so
    the matrix and fracture solves of one product are independent.
    """

    def __init__(self, problem: ReducedProblem):
        self.p = problem
        s = problem.system
        self.nD = s.n_D
        self.prev_hD = np.zeros(s.n_D)
        self.prev_lF = np.zeros(s.n_F)

    def apply(self, d):
        p, inner, nD = self.p, self.p.inner, self.nD
        r = p.Bcal @ d
        hD = inner.solve_D(r[:nD])
        hF = inner.solve_F(r[nD:] + inner.beta * (inner.G_DF_T @ self.prev_hD))
        hb = np.concatenate([hD, hF])
        r = p.G @ hb + p.Bp @ d
        lF = inner.solve_F(r[nD:])
        lD = inner.solve_D(r[:nD] + inner.beta * (inner.G_DF @ self.prev_lF))
        self.prev_hD, self.prev_lF = hD, lF
        lam = np.concatenate([lD, lF])
        return p.BcalT @ lam + p.Ccal @ d + p.BpT @ hb


@dataclass
class SolveReport:
    iterations: int
    relative_residual: float
    functional: float
    converged: bool
    variant: str = "coupled"
    wall_time: float = 0.0
    timings: dict = field(default_factory=dict)
    residual_history: list = field(default_factory=list)
    functional_history: list = field(default_factory=list)
    curvatures: list = field(default_factory=list)
    drift_events: int = 0
    breakdown: bool = False
    n_unknowns: int = 0


def reduced_cg(
    problem: ReducedProblem | SystemBlocks,
    tol: float = 1e-8,
    max_iter: int = 2000,
    variant: str = "coupled",
    w0: np.ndarray | None = None,
    restart: int | None = None,
    drift_every: int = 50,
    raise_on_max_iter: bool = False,
    verbose: bool = False,
    log=None,
):
    """Conjugate gradient on ``Gr w + g = 0``.

    Returns ``(w, h, report)``.  The heads are always recovered with the
    exactly coupled solve ``h = A^{-1}(B w + b)``.

    Every ``drift_every`` iterations the recursively updated gradient is
    compared with a fresh ``Gr w + g`` and replaced on a mismatch.
    ``restart``, when set, resets the direction to steepest descent every
    that many iterations.
    """
    if not tol > 0:
        raise InvalidParameter("tol must be positive")
    if variant not in VARIANTS:
        raise InvalidParameter(f"variant must be one of {VARIANTS}")
    if isinstance(problem, SystemBlocks):
        problem = ReducedProblem(problem)
    log = log or sys.stdout
    t_start = time.perf_counter()
    op = problem if variant == "coupled" else _LaggedOperator(problem)
    g = problem.g
    n = problem.n_w
    w = np.zeros(n) if w0 is None else np.array(w0, dtype=float)
    gamma = (op.apply(w) if w.any() else np.zeros(n)) + g
    norm0 = float(np.linalg.norm(gamma))
    report = SolveReport(0, 0.0, 0.0, True, variant, n_unknowns=problem.system.layout.n_total)

    def functional(w, gamma):
        return float(w @ gamma + g @ w + problem.J_b)

    report.residual_history.append(1.0 if norm0 > 0 else 0.0)
    report.functional_history.append(functional(w, gamma))
    if norm0 == 0.0:
        return _finish(problem, w, report, t_start, norm0)
    d = -gamma
    gg = float(gamma @ gamma)
    best_w, best_res = w.copy(), 1.0
    k = 0
    converged = False
    while k < max_iter:
        Gd = op.apply(d)
        curv = float(d @ Gd)
        report.curvatures.append(curv)
        if curv <= 0.0:
            if variant == "coupled":
                raise NonPositiveCurvature(f"d'Gd = {curv:.3e} at iteration {k}")
            report.breakdown = True
            break
        zeta = gg / curv
        w = w + zeta * d
        gamma = gamma + zeta * Gd
        k += 1
        reset = bool(restart) and k % restart == 0
        if variant == "coupled" and drift_every and k % drift_every == 0:
            true = problem.apply(w) + g
            if np.linalg.norm(true - gamma) > 1e-8 * max(np.linalg.norm(true), 1e-300):
                report.drift_events += 1
                gamma = true
        gg_new = float(gamma @ gamma)
        res = np.sqrt(gg_new) / norm0
        report.residual_history.append(res)
        J = functional(w, gamma)
        report.functional_history.append(J)
        if verbose:
            print(f"iter {k} residual {res:.6e} functional {J:.6e}", file=log)
        if res < best_res:
            best_w, best_res = w.copy(), res
        if res <= tol:
            converged = True
            break
        if reset:
            d = -gamma
        else:
            d = -gamma + (gg_new / gg) * d
        gg = gg_new
    report.iterations = k
    if not converged:
        w = best_w
    report.converged = converged
    out = _finish(problem, w, report, t_start, norm0)
    if not converged and raise_on_max_iter:
        raise MaxIterReached(f"no convergence in {k} iterations (residual {best_res:.2e})")
    return out


def _finish(problem, w, report, t_start, norm0):
    t_cg = time.perf_counter()
    h = problem.heads(w)
    true = problem.apply(w) + problem.g
    report.relative_residual = float(np.linalg.norm(true) / norm0) if norm0 > 0 else 0.0
    # roundoff can push an exactly attained zero minimum slightly negative
    report.functional = max(problem.system.functional(h, w), 0.0)
    report.wall_time = time.perf_counter() - t_start
    report.timings["setup"] = problem.setup_time
    report.timings["cg"] = t_cg - t_start
    return w, h, report


# ---------------------------------------------------------------------------
# Direct KKT oracle
# ---------------------------------------------------------------------------


def kkt_matrix(system: SystemBlocks) -> sp.csr_matrix:
    A = system.A_matrix()
    Bc = system.Bcal()
    Bp = system.Bcal_plus()
    return sp.bmat(
        [[system.G, Bp, A.T], [Bp.T, system.Ccal(), -Bc.T], [A, -Bc, None]], format="csc"
    )


def solve_kkt_direct(system: SystemBlocks, cap: int = 5000):
    """Solve the symmetric indefinite optimality system by sparse LU.

    Returns ``(h, w, lam)``.  Intended for small instances only.
    """
    M = kkt_matrix(system)
    n = M.shape[0]
    if n > cap:
        raise InvalidParameter(f"KKT dimension {n} exceeds the cap {cap}")
    rhs = np.concatenate([-system.c_h, -system.c_w, system.b])
    try:
        lu = splu(M)
    except RuntimeError as exc:
        raise SingularMatrix(str(exc)) from None
    x = lu.solve(rhs)
    for _ in range(2):
        x = x + lu.solve(rhs - M @ x)
    if not np.all(np.isfinite(x)):
        raise SingularMatrix("non-finite KKT solution")
    nh, nw = system.n_h, system.n_w
    return x[:nh], x[nh : nh + nw], x[nh + nw :]


def constraint_residuals(system: SystemBlocks, h: np.ndarray, w: np.ndarray):
    """Relative residuals of the matrix and fracture constraint rows."""
    nD = system.n_D
    r = system.A_matrix() @ h - system.Bcal() @ w - system.b
    rD, rF = r[:nD], r[nD:]
    scale_D = max(np.linalg.norm(system.b_D), np.linalg.norm(system.A_D @ h[:nD]), 1e-300)
    scale_F = max(np.linalg.norm(system.b_F), np.linalg.norm(system.A_F_matrix @ h[nD:]), 1e-300)
    return float(np.linalg.norm(rD) / scale_D), float(np.linalg.norm(rF) / scale_F) if len(rF) else 0.0


def evaluate_functional(system: SystemBlocks, h: np.ndarray, w: np.ndarray) -> float:
    """Matrix form of the mismatch functional."""
    return system.functional(h, w)
