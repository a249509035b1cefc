"""Command-line entry point.

Exit codes: 0 success, 2 usage or configuration error, 3 runtime failure.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import experiments as ex
from .oracle import gaussian_stable_truth, location_optimal_truth


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise ex.ConfigError(f"{self.prog}: error: {message}")


def _common(p: argparse.ArgumentParser):
    p.add_argument("--config", help="JSON config file (keys stable.*, optimal.*, solver.*)")
    p.add_argument("--out", default=None, help="output directory (default: ./perfinf_out)")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--reps", type=int, default=None)
    p.add_argument("--workers", type=int, default=None)
    p.add_argument("--level", type=float, default=None, help="nominal coverage level (default 0.95)")
    p.add_argument("--paper-scale", action="store_true", help="use the large replication profile")


def _stable_flags(p):
    p.add_argument("--eps", type=float, nargs="+", default=None, help="sensitivity grid")
    p.add_argument("--n", type=int, default=None, help="samples per step")
    p.add_argument("--T", type=int, default=None, help="number of retraining steps")
    p.add_argument("--n-mc", type=int, default=None)


def _optimal_flags(p):
    p.add_argument("--eps-mis", type=float, nargs="+", default=None, help="misspecification grid")
    p.add_argument("--n-pairs", type=int, default=None, help="number of (theta, Z) pairs")
    p.add_argument("--n-tilde", type=int, default=None)
    p.add_argument("--n-is", type=int, default=None)
    p.add_argument("--inner-m", type=int, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="perfinf", description="Inference for performative prediction simulations")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("stable-sim", help="dump repeated-retraining trajectories")
    _common(p)
    _stable_flags(p)
    p = sub.add_parser("optimal-sim", help="dump plug-in optimum replications")
    _common(p)
    _optimal_flags(p)
    p = sub.add_parser("coverage", help="coverage study for stable or optimal targets")
    _common(p)
    p.add_argument("--target", choices=("stable", "optimal"), default="stable")
    _stable_flags(p)
    _optimal_flags(p)
    p = sub.add_parser("qq", help="Mahalanobis Q-Q data for repeated retraining")
    _common(p)
    _stable_flags(p)
    p.add_argument("--t", type=int, default=None, help="step at which to compare")
    p = sub.add_parser("truth", help="print closed-form targets")
    p.add_argument("--family", choices=("gaussian", "location"), default="gaussian")
    p.add_argument("--eps", type=float, default=0.2)
    p.add_argument("--t", type=int, default=1)
    p.add_argument("--theta0", type=float, nargs="+", default=[1.0, 2.0])
    p.add_argument("--sigma-diag", type=float, nargs="+", default=[0.25, 0.25])
    p.add_argument("--b", type=float, default=1.0)
    p.add_argument("--beta1", type=float, default=0.5)
    p.add_argument("--sigma", type=float, default=0.5)
    return parser


def _config(args, kind: str, target: str) -> ex.ExperimentConfig:
    base = ex.ExperimentConfig(kind=kind, target=target)
    if args.paper_scale:
        base = ex.ExperimentConfig.paper_scale(kind=kind, target=target)
    cfg = ex.ExperimentConfig.from_json(args.config, base) if args.config else base
    cfg.kind, cfg.target = kind, target
    cfg.with_env()
    for name in ("seed", "reps", "workers", "level"):
        v = getattr(args, name, None)
        if v is not None:
            setattr(cfg, name, v)
    st = {"eps_grid": getattr(args, "eps", None), "N": getattr(args, "n", None), "T": getattr(args, "T", None),
          "n_mc": getattr(args, "n_mc", None), "qq_t": getattr(args, "t", None)}
    for k, v in st.items():
        if v is not None:
            setattr(cfg.stable, k, v)
    op = {"misspec_grid": getattr(args, "eps_mis", None), "N": getattr(args, "n_pairs", None),
          "N_tilde": getattr(args, "n_tilde", None), "n_is": getattr(args, "n_is", None),
          "inner_M": getattr(args, "inner_m", None)}
    for k, v in op.items():
        if v is not None:
            setattr(cfg.optimal, k, v)
    if getattr(args, "t", None) is None:
        cfg.stable.qq_t = min(cfg.stable.qq_t, cfg.stable.T)
    if target == "optimal" and getattr(args, "n", None) is not None and getattr(args, "n_pairs", None) is None:
        cfg.optimal.N = args.n
    cfg.out_dir = args.out or cfg.out_dir or "perfinf_out"
    return cfg.validate()


def _print_paths(paths):
    for p in paths:
        print(p)


def _truth(args) -> int:
    if args.family == "gaussian":
        tr = gaussian_stable_truth(args.eps, args.sigma_diag, args.theta0, args.t)
        print(json.dumps({"t": tr.t, "theta_t": tr.theta_t.tolist(), "sigma_t": tr.sigma_t.tolist(),
                          "theta_ps": tr.theta_ps.tolist()}, indent=2))
    else:
        tr = location_optimal_truth(args.b, args.beta1, args.sigma)
        print(json.dumps({"beta_star": tr.beta_star, "theta_po": tr.theta_po, "theta_grid": tr.theta_grid,
                          "jacobian": tr.jacobian, "sigma_beta_recal": tr.sigma_beta_recal,
                          "sigma_beta_erm": tr.sigma_beta_erm}, indent=2))
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command == "truth":
            try:
                return _truth(args)
            except ValueError as exc:
                print(f"perfinf: error: {exc}", file=sys.stderr)
                return 2
        if args.command == "coverage":
            cfg = _config(args, "coverage", args.target)
        elif args.command == "optimal-sim":
            cfg = _config(args, "optimal-sim", "optimal")
        else:
            cfg = _config(args, args.command, "stable")
    except ex.ConfigError as exc:
        print(str(exc), file=sys.stderr)
        return 2
    except SystemExit as exc:  # --help
        return int(exc.code or 0)

    try:
        out = Path(cfg.out_dir)
        if cfg.target == "optimal":
            rep = ex.run_coverage_optimal(cfg)
            paths = ex.write_optimal_outputs(rep, out)
        else:
            rep = ex.run_coverage_stable(cfg)
            if cfg.kind == "qq":
                paths = ex.write_qq_outputs(ex.stable_qq(rep), out)
            else:
                paths = ex.write_stable_outputs(rep, out, trajectories=cfg.kind == "stable-sim")
    except Exception as exc:
        print(f"perfinf: runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 3
    _print_paths(paths)
    return 0


if __name__ == "__main__":
    sys.exit(main())
