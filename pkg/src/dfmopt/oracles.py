"""Self-checks with independently computed reference values.

Used by the ``check`` command and by the test suite.  Every check returns
a :class:`CheckResult`; none of them raises on a failed comparison.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import Dirichlet, Fracture, FractureNetwork, Neumann, PorousDomain, clip_convex, clip_halfplane, polygon_area
from .harness import cross_cutting_divisions, problem1_setup, problem2_setup
from .intersection import build_interface_mesh, build_overlap_table
from .mesh import build_box_tet_mesh, build_fracture_tri_mesh
from .model import Parameters, discretize
from .solver import ReducedProblem, constraint_residuals, reduced_cg, solve_kkt_direct


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str = ""

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'} {self.name}: {self.detail}"


# ---------------------------------------------------------------------------
# Small instances
# ---------------------------------------------------------------------------


def _z_head(p):
    return np.atleast_2d(p)[:, 2]


def crossing_network(n_fractures: int = 2, alpha_edges: bool = False) -> FractureNetwork:
    """Unit cube with head ``z`` on the top and bottom faces and up to three
    intersecting fractures; optional Dirichlet edges on the first one."""
    bc = {"zmin": Dirichlet(_z_head), "zmax": Dirichlet(_z_head)}
    domain = PorousDomain([0.0, 0.0, 0.0], [1.0, 1.0, 1.0], np.eye(3), bc, 0.0)
    polys = [
        [[0.1, 0.15, 0.45], [0.9, 0.15, 0.55], [0.9, 0.85, 0.55], [0.1, 0.85, 0.45]],
        [[0.5, 0.1, 0.2], [0.5, 0.9, 0.2], [0.5, 0.9, 0.8], [0.5, 0.1, 0.8]],
        [[0.2, 0.3, 0.1], [0.8, 0.7, 0.1], [0.8, 0.7, 0.9], [0.2, 0.3, 0.9]],
    ]
    fractures = []
    for k in range(n_fractures):
        edge_bc = [Neumann(0.0)] * 4
        if alpha_edges and k == 0:
            edge_bc = [Neumann(0.0), Dirichlet(0.75), Neumann(0.0), Dirichlet(0.25)]
        fractures.append(Fracture.from_vertices(k, polys[k], 1.0 + 0.5 * k, edge_bc, source=0.1 * k, eps=domain.eps))
    return FractureNetwork(domain, fractures)


def small_instances():
    """``(name, network, parameters)`` of oracle-sized problems."""
    p1, p2 = problem1_setup(), problem2_setup()
    div = cross_cutting_divisions(p2.domain, 0.25)
    return [
        ("problem2 coarse", p2.network, Parameters(0.25, 0.5, tet_divisions=div)),
        ("problem1 coarse", p1.network, Parameters(0.25, 0.5, tet_divisions=div)),
        ("problem2 alpha=2 beta=0.5", p2.network, Parameters(0.25, 0.5, alpha=2.0, beta=0.5, tet_divisions=div)),
        ("two fractures", crossing_network(2), Parameters(0.25, 0.25)),
        ("two fractures alpha=0.5", crossing_network(2, True), Parameters(0.25, 0.25, alpha=0.5, beta=2.0)),
        ("three fractures", crossing_network(3), Parameters(0.34, 0.3)),
    ]


# ---------------------------------------------------------------------------
# Solver checks
# ---------------------------------------------------------------------------


def kkt_versus_cg(network, params, cg_tol: float = 1e-13):
    """Relative ``w`` difference and constraint residuals of both solvers."""
    disc = discretize(network, params)
    system = disc.system
    h_k, w_k, _ = solve_kkt_direct(system)
    w_c, h_c, rep = reduced_cg(ReducedProblem(system), tol=cg_tol, max_iter=20 * max(system.n_w, 10))
    diff = float(np.linalg.norm(w_c - w_k) / max(np.linalg.norm(w_k), 1e-300))
    res = max(*constraint_residuals(system, h_k, w_k), *constraint_residuals(system, h_c, w_c))
    return diff, res, system.n_h * 2 + system.n_w


def check_kkt_versus_cg(instances=None) -> CheckResult:
    instances = small_instances() if instances is None else instances
    worst_diff = worst_res = 0.0
    for _, net, params in instances:
        diff, res, dim = kkt_versus_cg(net, params)
        if dim >= 5000:
            return CheckResult("kkt-vs-cg", False, f"instance dimension {dim} too large")
        worst_diff, worst_res = max(worst_diff, diff), max(worst_res, res)
    ok = worst_diff <= 1e-7 and worst_res <= 1e-10
    return CheckResult(
        "kkt-vs-cg", ok, f"{len(instances)} instances, max w difference {worst_diff:.2e}, max residual {worst_res:.2e}"
    )


def gradient_check(problem: ReducedProblem, seed: int = 0, step: float = 1e-3):
    """Largest componentwise relative gap between central differences of
    ``J*`` and ``2 (Gr w + g)`` at a random point."""
    rng = np.random.default_rng(seed)
    n = problem.n_w
    w = rng.normal(size=n)
    exact = problem.gradient(w)
    fd = np.empty(n)
    for k in range(n):
        e = np.zeros(n)
        e[k] = step
        fd[k] = (problem.functional(w + e) - problem.functional(w - e)) / (2 * step)
    floor = 1e-8 * np.max(np.abs(exact))
    return float(np.max(np.abs(fd - exact) / np.maximum(np.abs(exact), floor)))


def gradient_instance() -> ReducedProblem:
    """Two crossing fractures with fewer than 50 control unknowns."""
    disc = discretize(crossing_network(2, True), Parameters(0.5, 0.5, alpha=0.5, gamma_ratio=2.0, seg_ratio=2.0))
    return ReducedProblem(disc.system)


def check_gradient() -> CheckResult:
    problem = gradient_instance()
    gap = gradient_check(problem)
    return CheckResult("gradient", problem.n_w <= 50 and gap <= 1e-5, f"{problem.n_w} controls, max relative gap {gap:.2e}")


def spd_probe(problem: ReducedProblem, n: int = 100, seed: int = 0) -> float:
    """Smallest Rayleigh quotient ``d'Gr d / d'd`` over random directions."""
    rng = np.random.default_rng(seed)
    worst = np.inf
    for _ in range(n):
        d = rng.normal(size=problem.n_w)
        worst = min(worst, float(d @ problem.apply(d)) / float(d @ d))
    return worst


def check_spd() -> CheckResult:
    worst = np.inf
    for _, net, params in small_instances()[3:]:
        worst = min(worst, spd_probe(ReducedProblem(discretize(net, params).system)))
    return CheckResult("reduced-hessian-spd", worst > 0, f"min Rayleigh quotient {worst:.3e}")


# ---------------------------------------------------------------------------
# Geometry checks
# ---------------------------------------------------------------------------


def _tilted_fracture(domain):
    return Fracture.from_vertices(
        0, [[0.05, 0.1, 0.245], [0.95, 0.05, 0.5], [0.9, 0.95, 0.755], [0.1, 0.9, 0.5]], eps=domain.eps
    )


def _clipped_area(fracture, domain) -> float:
    """Area of the fracture polygon inside the box, clipped face by face."""
    poly = [tuple(p) for p in fracture.polygon.tolist()]
    o, e1, e2 = fracture.frame.origin, fracture.frame.e1, fracture.frame.e2
    for axis in range(3):
        for bound, sign in ((domain.box_min[axis], 1.0), (domain.box_max[axis], -1.0)):
            # keep sign * (x[axis] - bound) >= 0, written in local coordinates
            n = sign * np.array([e1[axis], e2[axis]])
            c = sign * (o[axis] - bound)
            ln = float(np.linalg.norm(n))
            if ln < 1e-14:
                if c < 0:
                    return 0.0
                continue
            nx, ny = n / ln
            poly = clip_halfplane(poly, -c / ln * nx, -c / ln * ny, nx, ny, 1e-14)
            if not poly:
                return 0.0
    return polygon_area(poly)


def geometry_meshes():
    """Three tet meshes and fractures used by the geometry checks."""
    cube = PorousDomain([0.0, 0.0, 0.0], [1.0, 1.0, 1.0])
    return [
        ("kuhn 1/3", build_box_tet_mesh(cube, 1 / 3), _tilted_fracture(cube)),
        ("kuhn 1/5", build_box_tet_mesh(cube, 0.2), _tilted_fracture(cube)),
        ("kuhn 2x3x4 oversize", build_box_tet_mesh(cube, 0.25, divisions=(2, 3, 4)),
         Fracture.from_vertices(0, [[-0.3, -0.2, 0.3], [1.3, -0.2, 0.5], [1.3, 1.4, 0.7], [-0.3, 1.4, 0.5]], eps=cube.eps)),
    ]


def check_interface_meshes() -> CheckResult:
    worst = 0.0
    same = True
    for _, tet, frac in geometry_meshes():
        walk = build_interface_mesh(tet, frac, 0, 1e-12, "walk")
        brute = build_interface_mesh(tet, frac, 0, 1e-12, "brute")
        same &= walk.triangle_set() == brute.triangle_set()
        exact = _clipped_area(frac, PorousDomain([0, 0, 0], [1, 1, 1]))
        worst = max(worst, abs(walk.total_area - exact) / exact)
    return CheckResult("interface-mesh", same and worst <= 1e-10, f"walk equals brute force: {same}, max area error {worst:.2e}")


def monte_carlo_overlap(seed: int = 0, samples: int = 400_000):
    """Overlap-table measure of two random triangulations against sampling.

    Returns ``(table_area, mc_area, mc_sigma)``.
    """
    rng = np.random.default_rng(seed)
    square = Fracture.from_vertices(0, [[0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0]])
    a = build_fracture_tri_mesh(square, 0.3, 0, 1e-12)
    tri_b = rng.uniform(0.0, 1.0, size=(4, 3, 2))
    cross = (tri_b[:, 1, 0] - tri_b[:, 0, 0]) * (tri_b[:, 2, 1] - tri_b[:, 0, 1]) - (
        tri_b[:, 1, 1] - tri_b[:, 0, 1]
    ) * (tri_b[:, 2, 0] - tri_b[:, 0, 0])
    tri_b[cross < 0] = tri_b[cross < 0][:, ::-1]
    table = build_overlap_table(a, tri_b, "tri-tri", 1e-12)
    area = float(table.q_weights.sum())
    pts = rng.uniform(0.0, 1.0, size=(samples, 2))
    # a point covered by k of the random triangles counts k times, as in the table
    hits = np.zeros(samples)
    for t in tri_b:
        inside = np.ones(samples, dtype=bool)
        for k in range(3):
            p, q = t[k], t[(k + 1) % 3]
            inside &= (q[0] - p[0]) * (pts[:, 1] - p[1]) - (q[1] - p[1]) * (pts[:, 0] - p[0]) >= 0
        hits += inside
    return area, float(hits.mean()), float(hits.std() / np.sqrt(samples))


def check_overlap_tables() -> CheckResult:
    worst = 0.0
    for seed in range(3):
        area, mc, sigma = monte_carlo_overlap(seed)
        worst = max(worst, abs(area - mc) / max(sigma, 1e-300))
    return CheckResult("overlap-monte-carlo", worst <= 3.0, f"max deviation {worst:.2f} sigma over 3 draws")


def check_polygon_clipping(seed: int = 0, samples: int = 1_000_000) -> CheckResult:
    """Random overlapping triangle pairs: clipped area against sampling."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(3):
        # vertices in three sectors around the centre so both triangles contain it
        ang = rng.uniform(0, 2 * np.pi / 3, size=(2, 1)) + np.array([0, 2, 4]) * np.pi / 3
        rad = rng.uniform(0.2, 0.5, size=(2, 3))
        tris = 0.5 + np.stack([rad * np.cos(ang), rad * np.sin(ang)], axis=-1)
        polys = []
        for t in tris:
            p = [tuple(v) for v in t]
            polys.append(p if polygon_area(p) > 0 else p[::-1])
        got = polygon_area(clip_convex(polys[0], polys[1], 1e-12) or [(0, 0), (0, 0), (0, 0)])
        pts = rng.uniform(0, 1, size=(samples, 2))
        inside = np.ones(samples, dtype=bool)
        for p in polys:
            for k in range(3):
                a, b = p[k], p[(k + 1) % 3]
                inside &= (b[0] - a[0]) * (pts[:, 1] - a[1]) - (b[1] - a[1]) * (pts[:, 0] - a[0]) >= 0
        mc = inside.mean()
        sigma = np.sqrt(mc * (1 - mc) / samples)
        worst = max(worst, abs(got - mc) / max(sigma, 1e-12))
    return CheckResult("clipping-monte-carlo", worst <= 3.0, f"max deviation {worst:.2f} sigma")


def run_all(log=None) -> list:
    """Run every check; print one line each to ``log`` when given."""
    checks = [
        check_interface_meshes,
        check_overlap_tables,
        check_polygon_clipping,
        check_gradient,
        check_spd,
        check_kkt_versus_cg,
    ]
    results = []
    for fn in checks:
        r = fn()
        results.append(r)
        if log is not None:
            print(r.line(), file=log, flush=True)
    return results
