"""Command line entry point: ``cblab <subcommand> [options]``."""

from __future__ import annotations

import argparse
import sys

import numpy as np

from .harness import ExperimentConfig, emit_report, load_config, run_experiment
from .lattice import TRIANGULAR_BASIS
from .solver import HypothesisViolation

EXIT_OK, EXIT_ERROR, EXIT_HYPOTHESIS = 0, 1, 2

SUBCOMMANDS = {"converge": "converge", "stability": "stability", "phase-diagram": "phase_diagram",
               "residual-order": "residual_order", "solve": "solve_once"}


def _global_options(suppress: bool) -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    default = argparse.SUPPRESS if suppress else None
    p.add_argument("--config", default=default, help="YAML or JSON experiment config")
    p.add_argument("--seed", type=int, default=default)
    p.add_argument("--out", default=default, help="report path (stdout when omitted)")
    p.add_argument("--format", choices=("csv", "json"), default=default)
    p.add_argument("--threads", type=int, default=default)
    return p


def _solver_options(p: argparse.ArgumentParser):
    p.add_argument("--method", choices=("fixed_point", "newton"))
    p.add_argument("--tol", type=float)
    p.add_argument("--max-iter", type=int)
    p.add_argument("--override", action="store_true",
                   help="run fixed_point even when the IFT smallness hypothesis fails")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cblab", parents=[_global_options(False)],
                                     description="Atomistic stability and convergence experiments.")
    sub = parser.add_subparsers(dest="command", required=True)
    common = _global_options(True)
    p = sub.add_parser("converge", parents=[common], help="convergence sweep over ε")
    _solver_options(p)
    p.add_argument("--gamma", type=float)
    p = sub.add_parser("stability", parents=[common], help="λ_atom and λ_LH at the reference gradient")
    p.add_argument("--potential", help="pair potential name (lennard_jones, harmonic, morse)")
    p.add_argument("--deformation", help="scalar stretch t or row-major matrix 'a,b;c,d'")
    p.add_argument("--grid", type=int, help="grid points per axis")
    p.add_argument("--refine", type=int, help="local refinement passes")
    p.add_argument("--report", help="report path (alias of --out)")
    p = sub.add_parser("phase-diagram", parents=[common], help="stability phase diagram of a family")
    p.add_argument("--family", choices=("triangular", "ft_mass_spring"))
    sub.add_parser("residual-order", parents=[common], help="ℓ² residual of the sampled solution vs ε")
    p = sub.add_parser("solve", parents=[common], help="single atomistic solve with IFT constants")
    _solver_options(p)
    p.add_argument("--report", help="report path (alias of --out)")
    return parser


def make_config(args) -> ExperimentConfig:
    solver = {k: v for k, v in (("method", getattr(args, "method", None)),
                                ("tol", getattr(args, "tol", None)),
                                ("max_iter", getattr(args, "max_iter", None))) if v is not None}
    if getattr(args, "override", False):
        solver["override"] = True
    overrides = {"experiment": SUBCOMMANDS[args.command], "seed": args.seed, "threads": args.threads,
                 "gamma": getattr(args, "gamma", None)}
    if solver:
        overrides["solver"] = solver
    if getattr(args, "family", None):
        overrides["phase_diagram"] = {"family": args.family}
    stab = {k: v for k, v in (("grid_resolution", getattr(args, "grid", None)),
                              ("refinement_passes", getattr(args, "refine", None))) if v is not None}
    if stab:
        overrides["stability"] = stab
    out = getattr(args, "report", None) or args.out
    output = {k: v for k, v in (("path", out), ("format", args.format)) if v is not None}
    if output:
        overrides["output"] = output
    base = load_config(args.config).to_dict() if args.config else {}
    if getattr(args, "potential", None) or getattr(args, "deformation", None):
        base = _stability_overrides(base, args.potential, args.deformation)
    return ExperimentConfig.from_dict(base, **overrides)


def _stability_overrides(base: dict, potential, deformation) -> dict:
    """Apply --potential / --deformation to the potential and reference gradient."""
    cfg = ExperimentConfig.from_dict(base).to_dict()
    pot = cfg["potential"]
    if potential:
        if pot.get("kind") not in ("pair_sum", "triangular"):
            raise ValueError("--potential needs a pair_sum or triangular potential")
        pot["pair"] = {"kind": potential}
    if deformation:
        if ";" in deformation or "," in deformation:
            A0 = [[float(v) for v in row.split(",")] for row in deformation.split(";")]
        else:
            t = float(deformation)
            d = len(cfg["manufactured"]["A0"])
            basis = TRIANGULAR_BASIS if pot.get("kind") == "triangular" else np.eye(d)
            A0 = (t * basis).tolist()
        cfg["manufactured"]["A0"] = A0
    return cfg


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # usage errors are ordinary errors; 2 is reserved for hypothesis violations
        return EXIT_OK if exc.code in (0, None) else EXIT_ERROR
    try:
        cfg = make_config(args)
        report = run_experiment(cfg)
        text = emit_report(report, cfg.output["format"], cfg.output.get("path"))
        if cfg.output.get("path") is None:
            sys.stdout.write(text)
    except HypothesisViolation as exc:
        print(f"cblab: hypothesis violation: {exc}", file=sys.stderr)
        return EXIT_HYPOTHESIS
    except Exception as exc:
        print(f"cblab: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_ERROR
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
