"""Command-line front end.

Subcommands: ``solve``, ``converge``, ``dfn`` and ``check``.  Exit status is
0 on success, 1 when a solve fails or does not converge and 2 on invalid
input.
"""
from __future__ import annotations

import argparse
import csv
import sys
from pathlib import Path

from .config import build_network, exact_solution, load_config
from .errors import (
    AssumptionViolated,
    ConfigError,
    DegenerateFit,
    DfmError,
    EmptyInterface,
    GenerationFailed,
    InvalidGeometry,
    InvalidParameter,
    NonSegmentIntersection,
    OffPlane,
    SingularOperator,
)

EXIT_OK, EXIT_FAILURE, EXIT_INPUT = 0, 1, 2
INPUT_ERRORS = (
    ConfigError, InvalidParameter, InvalidGeometry, OffPlane, NonSegmentIntersection,
    AssumptionViolated, EmptyInterface, SingularOperator, GenerationFailed,
)

DFN_CSV_HEADER = [
    "level", "delta_D", "delta_F", "n_h", "n_q", "n_u", "n_total",
    "variant", "iterations", "relative_residual", "functional", "converged",
]


def _positive_int(text):
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"{text!r} is not an integer") from None
    if v < 1:
        raise argparse.ArgumentTypeError("must be at least 1")
    return v


def _positive_float(text):
    try:
        v = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"{text!r} is not a number") from None
    if not v > 0:
        raise argparse.ArgumentTypeError("must be positive")
    return v


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dfmopt", description="Darcy flow in fractured media by functional minimisation.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("solve", help="single solve described by a config file")
    p.add_argument("--config", required=True, help="INI-style run configuration")
    p.add_argument("--out", help="output directory (overrides [output] dir)")
    p.add_argument("--verbose", action="store_true", help="print one line per CG iteration")

    p = sub.add_parser("converge", help="convergence study on a built-in problem")
    p.add_argument("--problem", type=int, choices=(1, 2), required=True)
    p.add_argument("--levels", type=_positive_int, default=4)
    p.add_argument("--delta0", type=_positive_float, default=0.25, help="coarsest matrix mesh size")
    p.add_argument("--out", default="out")
    p.add_argument("--verbose", action="store_true")

    p = sub.add_parser("dfn", help="random fracture network experiment")
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--fractures", type=_positive_int, default=20)
    p.add_argument("--levels", type=_positive_int, default=2)
    p.add_argument("--delta0", type=_positive_float, default=0.25, help="coarsest mesh size")
    p.add_argument("--tol", type=_positive_float, default=1e-8)
    p.add_argument("--max-iter", type=_positive_int, default=2000)
    p.add_argument("--lagged", action="store_true", help="also run the lagged-coupling variant")
    p.add_argument("--out", default="out")
    p.add_argument("--verbose", action="store_true")

    sub.add_parser("check", help="run the built-in oracle suite")
    return parser


def _cmd_solve(args, out) -> int:
    from .model import discretize
    from .postprocess import ConvergenceRow, error_norms, export_fields, write_convergence_csv
    from .solver import ReducedProblem, reduced_cg

    cfg = load_config(args.config)
    out_dir = Path(args.out or cfg.output.dir)
    network = build_network(cfg)
    params = cfg.parameters()
    disc = discretize(network, params)
    n = cfg.numerics
    w, h, rep = reduced_cg(
        ReducedProblem(disc.system), tol=n.tol, max_iter=n.max_iter, variant=n.variant, verbose=args.verbose, log=out
    )
    rep.timings.update(disc.timings)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = export_fields(disc, h, out_dir) if cfg.output.vtk else []
    if cfg.output.exact:
        err = error_norms(disc, h, exact_solution(cfg.output.exact))
        row = ConvergenceRow(0, params.delta_D, params.delta_F, err.L2_D, err.H1_D, err.L2_F, err.H1_F,
                             rep.iterations, rep.functional)
        path = out_dir / "convergence.csv"
        write_convergence_csv([row], path)
        written.append(path)
        print(f"errors L2_D {err.L2_D:.4e} H1_D {err.H1_D:.4e} L2_F {err.L2_F:.4e} H1_F {err.H1_F:.4e}", file=out)
    lay = disc.layout
    print(f"unknowns n_h {lay.n_h} n_q {lay.n_q} n_u {lay.n_u} total {lay.n_total}", file=out)
    print(f"iterations {rep.iterations} relative residual {rep.relative_residual:.3e} functional {rep.functional:.6e}", file=out)
    print("timings " + " ".join(f"{k} {v:.2f}s" for k, v in rep.timings.items()), file=out)
    for p in written:
        print(f"wrote {p}", file=out)
    if not rep.converged:
        print(f"error: no convergence in {rep.iterations} iterations", file=sys.stderr)
        return EXIT_FAILURE
    return EXIT_OK


def _cmd_converge(args, out) -> int:
    from .harness import problem1_setup, problem2_setup, run_convergence
    from .postprocess import fit_rates, write_convergence_csv

    setup = problem1_setup() if args.problem == 1 else problem2_setup()
    rows, reports = run_convergence(setup, levels=args.levels, delta0=args.delta0, verbose=args.verbose, log=out)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / f"convergence_problem{args.problem}.csv"
    write_convergence_csv(rows, path)
    print("level delta_D  errL2_D    errH1_D    errL2_F    errH1_F    iters", file=out)
    for r in rows:
        print(f"{r.level:5d} {r.delta_D:.5f} {r.errL2_D:.4e} {r.errH1_D:.4e} {r.errL2_F:.4e} {r.errH1_F:.4e} {r.iters:5d}", file=out)
    if len(rows) >= 3:
        try:
            rates = fit_rates(rows)
            print("slopes " + " ".join(f"{k} {v:.3f}" for k, v in rates.items()), file=out)
        except DegenerateFit as exc:
            print(f"slopes unavailable: {exc}", file=out)
    else:
        print("slopes need at least 3 levels", file=out)
    print(f"wrote {path}", file=out)
    if not all(r.converged for r in reports):
        print("error: a level did not converge", file=sys.stderr)
        return EXIT_FAILURE
    return EXIT_OK


def _cmd_dfn(args, out) -> int:
    from .harness import generate_random_dfn, network_stats, run_dfn_experiment

    network = generate_random_dfn(args.seed, args.fractures)
    print(network_stats(network).summary(), file=out)
    levels = [(args.delta0 / 2**k, args.delta0 / 2**k) for k in range(args.levels)]
    variants = ("coupled", "beta_lagged") if args.lagged else ("coupled",)
    reports, decreasing = run_dfn_experiment(
        network, levels, tol=args.tol, max_iter=args.max_iter, variants=variants, verbose=args.verbose, log=out
    )
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "dfn.csv"
    ok = True
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(DFN_CSV_HEADER)
        for lvl, rep in enumerate(reports):
            for variant, r in rep.reports.items():
                writer.writerow([lvl, repr(float(rep.delta_D)), repr(float(rep.delta_F)), rep.n_h, rep.n_q, rep.n_u, rep.n_total,
                                 variant, r.iterations, repr(float(r.relative_residual)), repr(float(r.functional)), int(r.converged)])
                print(f"level {lvl} {variant} unknowns {rep.n_total} iterations {r.iterations} "
                      f"residual {r.relative_residual:.3e} functional {r.functional:.6e}"
                      + ("" if r.converged else " (not converged)"), file=out)
                if variant == "coupled":
                    ok &= r.converged
    if len(reports) > 1:
        print(f"functional strictly decreasing: {decreasing}", file=out)
    print(f"wrote {path}", file=out)
    if not ok:
        print("error: the coupled solve did not converge", file=sys.stderr)
        return EXIT_FAILURE
    return EXIT_OK


def _cmd_check(args, out) -> int:
    from .oracles import run_all

    results = run_all(log=out)
    passed = sum(r.passed for r in results)
    print(f"{passed}/{len(results)} checks passed", file=out)
    return EXIT_OK if passed == len(results) else EXIT_FAILURE


COMMANDS = {"solve": _cmd_solve, "converge": _cmd_converge, "dfn": _cmd_dfn, "check": _cmd_check}


def main(argv=None, out=None) -> int:
    out = out or sys.stdout
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_INPUT
    try:
        return COMMANDS[args.command](args, out)
    except INPUT_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except DfmError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
