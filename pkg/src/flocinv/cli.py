"""Command line interface.

Exit status is 0 on success, 2 for invalid input and 3 for a numerical
failure (including a study with a failed leg).
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .domain import Grid, project
from .errors import InvalidInputError, NumericalFailure
from .forward import integrate, write_trajectory_csv
from .harness import (ExperimentConfig, generate_data, load_config, read_observations,
                      run_experiment, truth_measure, write_observations)
from .inverse import InverseSetup, minimize, write_history
from .measures import MODES, conditional_distance, load_measure, save_measure, uniform

EXIT_OK, EXIT_INVALID, EXIT_NUMERICAL = 0, 2, 3
FMT = "%.17g"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INVALID, f"{self.prog}: error: {message}\n")


def _global_flags(p: argparse.ArgumentParser, suppress: bool) -> None:
    default = argparse.SUPPRESS if suppress else None
    p.add_argument("--config", default=default, help="JSON experiment config or run manifest")
    p.add_argument("--out", default=default, help="output directory")
    p.add_argument("--seed", type=int, default=default, help="unsigned 64-bit RNG seed")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="flocinv", description=__doc__.splitlines()[0])
    _global_flags(parser, suppress=False)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def command(name, help_text):
        p = sub.add_parser(name, help=help_text)
        _global_flags(p, suppress=True)
        return p

    p = command("forward", "solve the forward problem and write trajectory.csv")
    p.add_argument("--truth", help="beta22, arcsine or a measure JSON file")
    p.add_argument("--n", type=int, default=20, help="number of cells")
    p.add_argument("--stride", type=int, default=1, help="store every stride-th step")

    p = command("generate-data", "simulate binned counts (observations.csv + observations.json)")
    p.add_argument("--truth")
    p.add_argument("--n", type=int, default=8)
    p.add_argument("--sigma", type=float)

    p = command("invert", "estimate the measure for one grid size")
    p.add_argument("--observations", help="observations.json written by generate-data")
    p.add_argument("--truth", help="simulate data from this truth instead")
    p.add_argument("--n", type=int, default=8)
    p.add_argument("--sigma", type=float)

    command("study", "refinement study over the configured grid sizes")

    p = command("metric", "distance between two measure files")
    p.add_argument("first")
    p.add_argument("second")
    p.add_argument("--mode", choices=MODES, default="prohorov")
    p.add_argument("--tol", type=float, default=1e-6, help="bisection tolerance")
    return parser


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    changes = {}
    if args.out is not None:
        changes["out_dir"] = args.out
    if args.seed is not None:
        changes["rng_seed"] = args.seed
    for name in ("truth", "sigma"):
        value = getattr(args, name, None)
        if value is not None:
            changes[name] = value
    return replace(cfg, **changes) if changes else cfg


def _out_dir(cfg: ExperimentConfig) -> Path:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _forward(args, cfg: ExperimentConfig) -> int:
    grid = Grid(args.n, cfg.x_max)
    traj = integrate(project(cfg.initial_state(), grid), truth_measure(cfg.truth)(grid, grid),
                     cfg.kernels(), cfg.t_f, cfg.n_steps, stride=args.stride)
    path = _out_dir(cfg) / "trajectory.csv"
    write_trajectory_csv(traj, path)
    print(path)
    return EXIT_OK


def _simulate(args, cfg: ExperimentConfig):
    grid = Grid(args.n, cfg.x_max)
    truth = truth_measure(cfg.truth)(grid, grid)
    return generate_data(truth, cfg.kernels(), cfg.initial_state(), cfg.t_f, cfg.n_steps,
                         sigma=cfg.sigma, rng_seed=cfg.rng_seed)


def _generate(args, cfg: ExperimentConfig) -> int:
    obs = _simulate(args, cfg)
    meta = {"truth": cfg.truth, "n_cells": args.n, "x_max": cfg.x_max, "t_f": cfg.t_f,
            "n_steps": cfg.n_steps}
    print(write_observations(obs, _out_dir(cfg) / "observations.csv", meta))
    return EXIT_OK


def _invert(args, cfg: ExperimentConfig) -> int:
    if args.observations:
        obs, info = read_observations(args.observations)
        n = int(info.get("n_cells", len(obs.bin_edges) - 1))
    else:
        obs, n = _simulate(args, cfg), args.n
    grid = Grid(n, cfg.x_max)
    setup = InverseSetup(grid, cfg.kernels(), project(cfg.initial_state(), grid), cfg.t_f, obs, cfg.n_steps)
    est = minimize(setup, uniform(grid, grid), cfg.options())
    out = _out_dir(cfg)
    save_measure(est.measure, out / "estimate.json")
    write_history(est, out / "estimate_history.csv")
    print(json.dumps({"cost": FMT % est.cost, "iterations": est.iterations,
                      "converged": est.converged, "reason": est.reason}))
    return EXIT_OK


def _study(args, cfg: ExperimentConfig) -> int:
    result = run_experiment(cfg)
    for n, e, c, f in zip(result.curve.n_values, result.curve.errors, result.curve.costs,
                          result.curve.subsequence_flags):
        print(n, FMT % e, FMT % c, int(f))
    for n, msg in result.curve.failures:
        print(f"N={n} failed: {msg}", file=sys.stderr)
    return EXIT_OK if result.ok else EXIT_NUMERICAL


def _metric(args, cfg: ExperimentConfig) -> int:
    d = conditional_distance(load_measure(args.first), load_measure(args.second), args.mode, args.tol)
    print(FMT % d)
    return EXIT_OK


HANDLERS = {"forward": _forward, "generate-data": _generate, "invert": _invert,
            "study": _study, "metric": _metric}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.seed is not None and not 0 <= args.seed < 2**64:
            raise InvalidInputError("--seed must be an unsigned 64-bit integer")
        return HANDLERS[args.command](args, _config(args))
    except NumericalFailure as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (InvalidInputError, OSError) as exc:
        print(f"invalid input: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
