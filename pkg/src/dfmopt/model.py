"""From a fracture network and numerical parameters to assembled operators."""
from __future__ import annotations

import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import assembly
from .errors import InvalidParameter
from .geometry import FractureNetwork
from .intersection import build_interface_mesh, build_overlap_table
from .mesh import (
    build_box_tet_mesh,
    build_dof_layout,
    build_fracture_tri_mesh,
    build_trace_mesh,
)


def worker_count() -> int:
    """Thread cap from ``DFM_THREADS`` (default: CPU count)."""
    raw = os.environ.get("DFM_THREADS")
    if raw:
        try:
            return max(1, int(raw))
        except ValueError:
            raise InvalidParameter(f"DFM_THREADS must be an integer, got {raw!r}") from None
    return os.cpu_count() or 1


def parallel_map(fn, items) -> list:
    items = list(items)
    n = min(worker_count(), len(items))
    if n <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items))


@dataclass
class Parameters:
    """Numerical parameters of one discretisation level.

    Mesh sizes of the control meshes are ratios of the fracture head mesh
    size: ``delta_Gamma = gamma_ratio * delta_F`` and
    ``delta_S = seg_ratio * delta_F``.
    """

    delta_D: float
    delta_F: float
    alpha: float = 1.0
    beta: float = 1.0
    gamma_ratio: float = 2.0
    seg_ratio: float = 2.0
    tet_divisions: tuple | None = None

    def validate(self) -> None:
        for name in ("delta_D", "delta_F", "gamma_ratio", "seg_ratio"):
            if not getattr(self, name) > 0:
                raise InvalidParameter(f"{name} must be positive")
        if self.alpha < 0 or self.beta < 0:
            raise InvalidParameter("alpha and beta must be non-negative")


@dataclass(eq=False)
class Discretization:
    network: FractureNetwork
    params: Parameters
    tet_mesh: object
    h_meshes: list
    q_meshes: list
    seg_meshes: dict
    interface_meshes: list
    couplings: list
    trace_blocks: list
    system: assembly.SystemBlocks
    timings: dict = field(default_factory=dict)

    @property
    def layout(self):
        return self.system.layout


def discretize(network: FractureNetwork, params: Parameters) -> Discretization:
    """Build every mesh, overlap table and operator for ``network``."""
    params.validate()
    eps = network.eps
    dom = network.domain
    fr = network.fractures
    timings = {}
    t0 = time.perf_counter()
    tet = build_box_tet_mesh(dom, params.delta_D, divisions=params.tet_divisions)
    idx = range(len(fr))
    h_meshes = parallel_map(lambda i: build_fracture_tri_mesh(fr[i], params.delta_F, i, eps), idx)
    q_meshes = parallel_map(
        lambda i: build_fracture_tri_mesh(fr[i], params.gamma_ratio * params.delta_F, i, eps), idx
    )
    traces = network.traces
    seg_meshes = {}
    for m, tr in enumerate(traces):
        for k in tr.fracture_pair:
            seg_meshes[(k, m)] = build_trace_mesh(tr, k, params.seg_ratio * params.delta_F)
    timings["meshing"] = time.perf_counter() - t0

    t0 = time.perf_counter()

    def fracture_job(i):
        im = build_interface_mesh(tet, fr[i], i, eps)
        im_h = build_overlap_table(im, h_meshes[i], "tri-tri", eps)
        q_h = build_overlap_table(q_meshes[i], h_meshes[i], "tri-tri", eps)
        q_im = build_overlap_table(q_meshes[i], im, "tri-tri", eps)
        return im, im_h, q_h, q_im

    jobs = parallel_map(fracture_job, idx)
    interface_meshes = [j[0] for j in jobs]
    timings["intersections"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    couplings = parallel_map(
        lambda i: assembly.assemble_G_blocks(tet, interface_meshes[i], h_meshes[i], fr[i], jobs[i][1]), idx
    )
    DE = parallel_map(
        lambda i: assembly.assemble_D_E(
            tet, interface_meshes[i], h_meshes[i], q_meshes[i], fr[i], jobs[i][2], jobs[i][3]
        ),
        idx,
    )
    trace_blocks = parallel_map(
        lambda m: assembly.assemble_trace_blocks(traces[m], m, fr, h_meshes, seg_meshes, eps),
        range(len(traces)),
    )
    dir_D = assembly.dirichlet_tet(tet, dom)
    dir_F = [assembly.dirichlet_fracture(h, f) for h, f in zip(h_meshes, fr)]
    _, _, A_D_full, load_D = assembly.assemble_A_D(tet, interface_meshes, fr, dom, params.beta, dir_D)
    A_F_full = assembly.assemble_A_F(h_meshes, fr, trace_blocks, params.alpha, dir_F)
    load_F = [assembly.fracture_load(h, f) for h, f in zip(h_meshes, fr)]
    layout = build_dof_layout(
        dir_D.n_free,
        [d.n_free for d in dir_F],
        q_meshes,
        seg_meshes,
        [tr.fracture_pair for tr in traces],
    )
    system = assembly.build_system_blocks(
        layout, params.alpha, params.beta, A_D_full, load_D, A_F_full, load_F,
        couplings, trace_blocks, [d for d, _ in DE], [e for _, e in DE], dir_D, dir_F,
    )
    timings["assembly"] = time.perf_counter() - t0
    return Discretization(
        network, params, tet, h_meshes, q_meshes, seg_meshes, interface_meshes,
        couplings, trace_blocks, system, timings,
    )
