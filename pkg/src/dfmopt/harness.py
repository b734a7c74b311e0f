"""Built-in experiments: two manufactured single-fracture problems and a
seeded random fracture network."""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from .errors import GenerationFailed, InvalidParameter, NonSegmentIntersection
from .geometry import Dirichlet, Fracture, FractureNetwork, Neumann, PorousDomain, _pair_trace
from .model import Parameters, discretize
from .postprocess import AnalyticSolution, ConvergenceRow, error_norms
from .solver import ReducedProblem, reduced_cg


# ---------------------------------------------------------------------------
# Manufactured problems on the unit cube with one horizontal fracture
# ---------------------------------------------------------------------------


def _outward_flux(grad, normal):
    n = np.asarray(normal, dtype=float)
    return lambda p: np.asarray(grad(p)) @ n


@dataclass
class ProblemSetup:
    domain: PorousDomain
    network: FractureNetwork
    exact: AnalyticSolution
    alpha: float = 1.0
    beta: float = 1.0
    name: str = ""


def _unit_cube_problem(value, gradient, f_matrix, f_fracture, name) -> ProblemSetup:
    bc = {
        "xmin": Dirichlet(value),
        "xmax": Dirichlet(value),
        "zmin": Dirichlet(value),
        "zmax": Dirichlet(value),
        "ymin": Neumann(_outward_flux(gradient, [0, -1, 0])),
        "ymax": Neumann(_outward_flux(gradient, [0, 1, 0])),
    }
    domain = PorousDomain([0.0, 0.0, -0.5], [1.0, 1.0, 0.5], np.eye(3), bc, f_matrix)
    # edges: y=0, x=1, y=1, x=0
    edge_bc = [
        Neumann(_outward_flux(gradient, [0, -1, 0])),
        Dirichlet(value),
        Neumann(_outward_flux(gradient, [0, 1, 0])),
        Dirichlet(value),
    ]
    frac = Fracture.from_vertices(
        0, [[0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0]], 1.0, edge_bc, source=f_fracture
    )
    exact = AnalyticSolution(value, gradient)
    return ProblemSetup(domain, FractureNetwork(domain, [frac]), exact, 1.0, 1.0, name)


def problem1_value(p):
    p = np.atleast_2d(p)
    return 0.25 * (p[:, 0] ** 2 + p[:, 1] ** 2) + 0.5 * np.abs(p[:, 2])


def problem1_gradient(p):
    p = np.atleast_2d(p)
    return np.column_stack([0.5 * p[:, 0], 0.5 * p[:, 1], 0.5 * np.sign(p[:, 2])])


def problem2_value(p):
    p = np.atleast_2d(p)
    return 0.5 * (p[:, 0] ** 2 - p[:, 1] ** 2) + p[:, 2]


def problem2_gradient(p):
    p = np.atleast_2d(p)
    return np.column_stack([p[:, 0], -p[:, 1], np.ones(len(p))])


def problem1_setup() -> ProblemSetup:
    """Kinked solution ``(x^2+y^2)/4 + |z|/2`` with matrix source -1.

    The fracture equation needs a source of -2: the in-plane Laplacian
    contributes 1 and the jump of the normal derivative across the plane
    another 1.
    """
    return _unit_cube_problem(problem1_value, problem1_gradient, -1.0, -2.0, "problem1")


def problem2_setup() -> ProblemSetup:
    """Smooth harmonic solution ``(x^2-y^2)/2 + z`` with no sources."""
    return _unit_cube_problem(problem2_value, problem2_gradient, 0.0, 0.0, "problem2")


def ladder(levels: int, delta0: float = 0.25, ratio_F: float = 2.0):
    """Refinement ladder of ``(delta_D, delta_F)`` pairs, halving each level."""
    return [(delta0 / 2**k, ratio_F * delta0 / 2**k) for k in range(levels)]


def cross_cutting_divisions(domain: PorousDomain, delta_D: float):
    """Tet grid counts that keep every grid plane off ``z = 0``.

    Odd counts along z on a box symmetric about ``z = 0`` place the
    fracture strictly inside a layer of cells.
    """
    ext = domain.box_max - domain.box_min
    n = [max(1, math.ceil(e / delta_D - 1e-9)) for e in ext]
    if n[2] % 2 == 0:
        n[2] += 1
    return tuple(n)


def run_convergence(setup: ProblemSetup, levels: int = 4, delta0: float = 0.25, ratio_F: float = 2.0,
                    tol: float = 1e-10, split: bool = True, verbose: bool = False, log=None):
    """Solve ``setup`` on a ladder and return ``(rows, reports)``."""
    rows, reports = [], []
    for lvl, (dD, dF) in enumerate(ladder(levels, delta0, ratio_F)):
        params = Parameters(dD, dF, setup.alpha, setup.beta,
                            tet_divisions=cross_cutting_divisions(setup.domain, dD))
        disc = discretize(setup.network, params)
        problem = ReducedProblem(disc.system)
        w, h, rep = reduced_cg(problem, tol=tol, verbose=verbose, log=log)
        rep.timings.update(disc.timings)
        err = error_norms(disc, h, setup.exact, split=split)
        rows.append(ConvergenceRow(lvl, dD, dF, err.L2_D, err.H1_D, err.L2_F, err.H1_F, rep.iterations, rep.functional))
        reports.append(rep)
    return rows, reports


# ---------------------------------------------------------------------------
# Random fracture networks
# ---------------------------------------------------------------------------


@dataclass
class NetworkStats:
    n_fractures: int
    n_traces: int
    traces_per_fracture_min: int
    traces_per_fracture_max: int
    min_trace_angle_deg: float
    min_normal_angle_deg: float
    connected: bool

    def summary(self) -> str:
        return (
            f"{self.n_fractures} fractures, {self.n_traces} traces, "
            f"traces per fracture {self.traces_per_fracture_min}-{self.traces_per_fracture_max}, "
            f"min trace-trace angle {self.min_trace_angle_deg:.1f} deg, "
            f"min normal-normal angle {self.min_normal_angle_deg:.1f} deg"
        )


def _acute_angle_deg(u, v) -> float:
    c = abs(float(np.dot(u, v))) / (np.linalg.norm(u) * np.linalg.norm(v))
    return float(np.degrees(np.arccos(min(1.0, c))))


def _components(n: int, edges) -> int:
    parent = list(range(n))

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    for a, b in edges:
        parent[find(a)] = find(b)
    return len({find(a) for a in range(n)})


def network_stats(network: FractureNetwork) -> NetworkStats:
    """Counts and narrowest angles of a network's traces."""
    nf = len(network.fractures)
    traces = network.traces
    per = [0] * nf
    for tr in traces:
        for k in tr.fracture_pair:
            per[k] += 1
    min_trace = 90.0
    for i in range(nf):
        own = [traces[m] for m in network.traces_of(i)]
        for a in range(len(own)):
            for b in range(a + 1, len(own)):
                da = own[a].endpoints3d[1] - own[a].endpoints3d[0]
                db = own[b].endpoints3d[1] - own[b].endpoints3d[0]
                min_trace = min(min_trace, _acute_angle_deg(da, db))
    min_normal = 90.0
    for tr in traces:
        i, j = tr.fracture_pair
        min_normal = min(min_normal, _acute_angle_deg(network.fractures[i].normal, network.fractures[j].normal))
    edges = [tr.fracture_pair for tr in traces]
    return NetworkStats(
        nf, len(traces), min(per) if per else 0, max(per) if per else 0,
        min_trace, min_normal, _components(nf, edges) == 1 if nf else True,
    )


def _random_unit(rng) -> np.ndarray:
    v = rng.normal(size=3)
    return v / np.linalg.norm(v)


def _random_rectangle(rng, lo, hi, margin, size_range, top: bool):
    """Rectangle vertices inside the box; ``top`` ones have an edge on the top face."""
    a = rng.uniform(*size_range)
    b = rng.uniform(*size_range)
    if top:
        phi = rng.uniform(0.0, 2.0 * np.pi)
        e1 = np.array([np.cos(phi), np.sin(phi), 0.0])
        e2 = np.array([0.0, 0.0, 1.0])
        c = np.array([rng.uniform(lo[0] + margin, hi[0] - margin), rng.uniform(lo[1] + margin, hi[1] - margin), hi[2] - b])
        v = np.array([c - a * e1 + b * e2, c - a * e1 - b * e2, c + a * e1 - b * e2, c + a * e1 + b * e2])
        v[[0, 3], 2] = hi[2]
        return v
    n = _random_unit(rng)
    t = np.cross(n, _random_unit(rng))
    e1 = t / np.linalg.norm(t)
    e2 = np.cross(n, e1)
    c = rng.uniform(lo + margin, hi - margin)
    return np.array([c - a * e1 - b * e2, c + a * e1 - b * e2, c + a * e1 + b * e2, c - a * e1 + b * e2])


def _inside(v, lo, hi, margin, top: bool) -> bool:
    upper = hi - margin
    if top:
        return bool(np.all(v >= lo + margin) and np.all(v[:, :2] <= upper[:2]) and np.all(v[:, 2] <= hi[2]))
    return bool(np.all(v >= lo + margin) and np.all(v <= upper))


_REJECT = object()


def _pair_segment(fi: Fracture, fj: Fracture, eps, reach, min_trace, min_angle):
    """Trace segment of an admissible pair, ``None`` if disjoint, ``_REJECT`` otherwise."""
    try:
        seg = _pair_trace(fi, fj, eps, reach)
    except NonSegmentIntersection:
        return _REJECT
    if seg is None:
        return None
    if _acute_angle_deg(fi.normal, fj.normal) < min_angle:
        return _REJECT
    if np.linalg.norm(seg[1] - seg[0]) < min_trace:
        return _REJECT
    return seg


def generate_random_dfn(
    seed: int,
    n_fractures: int = 20,
    domain: PorousDomain | None = None,
    n_top: int | None = None,
    size_range=(0.3, 0.6),
    min_trace_length: float = 0.1,
    min_normal_angle: float = 10.0,
    min_trace_angle: float = 10.0,
    max_retries: int = 200,
    top_value: float = 1.0,
    bottom_value: float = 0.0,
) -> FractureNetwork:
    """Seeded network of rectangular fractures in the cube ``[-1, 1]^3``.

    ``n_top`` fractures are vertical with one edge on the top face.  Whole
    networks are redrawn until every fracture carries a trace and the
    trace graph is connected.  Boundary data follow :func:`apply_dfn_bcs`.
    """
    if n_fractures < 1:
        raise InvalidParameter("n_fractures must be at least 1")
    if domain is None:
        domain = PorousDomain([-1.0, -1.0, -1.0], [1.0, 1.0, 1.0])
    n_top = max(1, n_fractures // 5) if n_top is None else n_top
    lo, hi = domain.box_min, domain.box_max
    margin = 0.02 * float(np.min(hi - lo))
    eps = domain.eps
    reach = 4.0 * domain.diameter + float(np.linalg.norm(hi))
    rng = np.random.default_rng(seed)
    for _ in range(max_retries):
        fractures = []
        directions = []
        attempts = 0
        while len(fractures) < n_fractures and attempts < 200 * n_fractures:
            attempts += 1
            top = len(fractures) < n_top
            v = _random_rectangle(rng, lo, hi, margin, size_range, top)
            if not _inside(v, lo, hi, margin, top):
                continue
            try:
                frac = Fracture.from_vertices(len(fractures), v, eps=eps)
            except Exception:
                continue
            segs = [_pair_segment(frac, other, eps, reach, min_trace_length, min_normal_angle) for other in fractures]
            if any(sg is _REJECT for sg in segs):
                continue
            new_dirs = {}
            ok = True
            for k, sg in enumerate(segs):
                if sg is None:
                    continue
                d = sg[1] - sg[0]
                # the new trace must not run nearly parallel to traces already on either fracture
                for other in directions[k] + list(new_dirs.values()):
                    if _acute_angle_deg(d, other) < min_trace_angle:
                        ok = False
                new_dirs[k] = d
            if not ok:
                continue
            for k, d in new_dirs.items():
                directions[k].append(d)
            directions.append(list(new_dirs.values()))
            fractures.append(frac)
        if len(fractures) < n_fractures:
            continue
        try:
            net = FractureNetwork(domain, fractures)
            stats = network_stats(net)
        except Exception:
            continue
        if stats.traces_per_fracture_min >= 1 and stats.connected:
            return apply_dfn_bcs(net, top_value, bottom_value)
    raise GenerationFailed(f"no admissible network after {max_retries} draws")


def apply_dfn_bcs(network: FractureNetwork, top_value: float = 1.0, bottom_value: float = 0.0) -> FractureNetwork:
    """Head ``bottom_value`` on the bottom box face, ``top_value`` on fracture
    edges lying on the top face; everything else insulated."""
    dom = network.domain
    bc = {name: Neumann(0.0) for name in ("xmin", "xmax", "ymin", "ymax", "zmax")}
    bc["zmin"] = Dirichlet(bottom_value)
    domain = PorousDomain(dom.box_min, dom.box_max, dom.K, bc, dom.source)
    top = dom.box_max[2]
    fractures = []
    for f in network.fractures:
        v = f.vertices3d
        edge_bc = []
        for k in range(len(v)):
            a, b = v[k], v[(k + 1) % len(v)]
            on_top = abs(a[2] - top) <= dom.eps and abs(b[2] - top) <= dom.eps
            edge_bc.append(Dirichlet(top_value) if on_top else Neumann(0.0))
        fractures.append(Fracture(f.id, v, f.frame, f.K, tuple(edge_bc), f.source))
    return FractureNetwork(domain, fractures)


@dataclass
class DfnLevelReport:
    delta_D: float
    delta_F: float
    n_h: int
    n_q: int
    n_u: int
    n_total: int
    reports: dict = field(default_factory=dict)
    curvature_ok: bool = True
    timings: dict = field(default_factory=dict)

    @property
    def functional(self) -> float:
        return self.reports["coupled"].functional


def run_dfn_experiment(
    network: FractureNetwork,
    levels=((0.25, 0.25), (0.125, 0.125)),
    alpha: float = 1.0,
    beta: float = 1.0,
    tol: float = 1e-8,
    max_iter: int = 2000,
    variants=("coupled", "beta_lagged"),
    lagged_max_iter: int | None = None,
    gamma_ratio: float = 4.0,
    seg_ratio: float = 4.0,
    verbose: bool = False,
    log=None,
):
    """Solve the network on each ``(delta_D, delta_F)`` level.

    The control meshes default to four times the fracture mesh size, which
    keeps the reduced Hessian well enough conditioned for unpreconditioned
    CG on networks with many traces.

    Returns ``(level_reports, functional_decreasing)``.
    """
    out = []
    for dD, dF in levels:
        disc = discretize(network, Parameters(dD, dF, alpha, beta, gamma_ratio, seg_ratio))
        problem = ReducedProblem(disc.system)
        lay = disc.layout
        rep = DfnLevelReport(dD, dF, lay.n_h, lay.n_q, lay.n_u, lay.n_total, timings=dict(disc.timings))
        for variant in variants:
            t0 = time.perf_counter()
            mi = max_iter if variant == "coupled" or lagged_max_iter is None else lagged_max_iter
            _, _, r = reduced_cg(problem, tol=tol, max_iter=mi, variant=variant, verbose=verbose, log=log)
            r.timings.update(disc.timings)
            rep.reports[variant] = r
            rep.timings[variant] = time.perf_counter() - t0
            if variant == "coupled":
                rep.curvature_ok = all(c > 0 for c in r.curvatures)
        out.append(rep)
    vals = [r.functional for r in out if "coupled" in r.reports]
    decreasing = all(b < a for a, b in zip(vals, vals[1:]))
    return out, decreasing
