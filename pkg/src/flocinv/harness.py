"""Experiment orchestration: truth families, synthetic data and refinement runs.

A run writes only CSV and JSON.  The manifest records the full configuration
together with per-leg noise seeds and seed measures; feeding it back through
:func:`load_config` reproduces every CSV byte for byte.
"""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .domain import Grid, KernelSet, builtin_kernels, project
from .errors import InvalidInputError
from .forward import DEFAULT_STEPS, ObservationSet, add_noise, integrate, partial_moments
from .inverse import (EXTRA_TIMES, REFERENCE_CELLS, ErrorCurve, MinimizeOptions, leg_seed,
                      refinement_study, sample_times, write_error_curve, write_history)
from .measures import ConditionalMeasure, cdf, from_cdf, load_measure, save_measure, to_json_dict, uniform

logger = logging.getLogger(__name__)

TRUTHS = ("beta22", "arcsine")
MANIFEST_VERSION = 1


# ---------------------------------------------------------------------------
# Truth families
# ---------------------------------------------------------------------------


def _ratio(kind: str, x, y):
    if kind not in TRUTHS:
        raise InvalidInputError(f"truth must be one of {TRUTHS}, got {kind!r}")
    x, y = np.broadcast_arrays(np.asarray(x, dtype=float), np.asarray(y, dtype=float))
    if np.any(y <= 0):
        raise InvalidInputError("parent size must be positive")
    if np.any(x < 0):
        raise InvalidInputError("daughter size must be nonnegative")
    return x, y


def truth_density(kind: str, x, y):
    """Daughter density given parent ``y``: Beta(2,2) or arcsine in ``x / y``."""
    x, y = _ratio(kind, x, y)
    inside = x <= y
    xs = np.where(inside, x, 0.5 * y)
    if kind == "beta22":
        val = 6.0 * xs * (y - xs) / y**3
    else:
        with np.errstate(divide="ignore"):
            val = 1.0 / (np.pi * np.sqrt(xs * (y - xs)))
    out = np.where(inside, val, 0.0)
    return out if out.ndim else float(out)


def truth_cdf(kind: str, x, y):
    """Closed-form CDF of :func:`truth_density`; equal to 1 for ``x >= y``."""
    x, y = _ratio(kind, x, y)
    u = np.clip(x / y, 0.0, 1.0)
    out = 3 * u**2 - 2 * u**3 if kind == "beta22" else (2 / np.pi) * np.arcsin(np.sqrt(u))
    out = np.where(x >= y, 1.0, out)
    return out if out.ndim else float(out)


def truth_measure(kind: str) -> Callable[[Grid, Grid], ConditionalMeasure]:
    """Generator discretizing a truth on any (daughter, parent) grid pair.

    ``kind`` is a family name or the path of a saved measure, which is
    resampled through its CDF.
    """
    if kind in TRUTHS:
        return lambda dg, pg: from_cdf(lambda x, y: truth_cdf(kind, x, y), dg, pg)
    path = Path(kind)
    if not path.is_file():
        raise InvalidInputError(f"truth {kind!r} is neither {TRUTHS} nor a measure file")
    stored = load_measure(path)

    def generate(dg: Grid, pg: Grid) -> ConditionalMeasure:
        if dg == stored.daughter_grid and pg == stored.parent_grid:
            return stored
        return from_cdf(lambda x, y: cdf(stored, x, y), dg, pg)

    return generate


def exponential_initial_state(scale: float = 1e3, rate: float = 1.0) -> Callable:
    return lambda x: scale * np.exp(-rate * np.asarray(x, dtype=float))


def generate_data(truth: ConditionalMeasure, kernels: KernelSet, initial_state: Callable,
                  t_f: float = 1.0, n_steps: int = DEFAULT_STEPS, n_times: Optional[int] = None,
                  sigma: float = 0.0, rng_seed=None, bin_edges=None) -> ObservationSet:
    """Simulate binned counts from ``truth`` and add seeded Gaussian noise.

    Bins default to the cells of the truth's parent grid and times to
    ``N + 40`` equally spaced points on ``(0, t_f]``.
    """
    grid = truth.parent_grid
    if truth.daughter_grid != grid:
        raise InvalidInputError("data generation needs daughter and parent grids to agree")
    n_times = grid.n_cells + EXTRA_TIMES if n_times is None else int(n_times)
    if n_times < 1:
        raise InvalidInputError("n_times must be positive")
    traj = integrate(project(initial_state, grid), truth, kernels, t_f, n_steps)
    edges = grid.nodes if bin_edges is None else bin_edges
    return add_noise(partial_moments(traj, edges, sample_times(n_times, t_f)), sigma, rng_seed)


def write_observations(obs: ObservationSet, csv_path, meta: Optional[dict] = None) -> Path:
    """Counts as CSV ``bin, time_index, x_left, x_right, t, count`` plus JSON metadata."""
    csv_path = Path(csv_path)
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["bin", "time_index", "x_left", "x_right", "t", "count"])
        e, t = obs.bin_edges, obs.times
        for j in range(obs.counts.shape[0]):
            for i in range(obs.counts.shape[1]):
                w.writerow([j, i, "%.17g" % e[j], "%.17g" % e[j + 1], "%.17g" % t[i],
                            "%.17g" % obs.counts[j, i]])
    info = dict(meta or {})
    info.update(counts_csv=csv_path.name, bin_edges=[float(v) for v in obs.bin_edges],
                times=[float(v) for v in obs.times], noise_sigma=obs.noise_sigma,
                rng_seed=obs.rng_seed, noise="gaussian, numpy default_rng (PCG64)")
    json_path = csv_path.with_suffix(".json")
    json_path.write_text(json.dumps(info, indent=2) + "\n")
    return json_path


def read_observations(json_path) -> tuple[ObservationSet, dict]:
    json_path = Path(json_path)
    try:
        info = json.loads(json_path.read_text())
        edges, times = np.array(info["bin_edges"], float), np.array(info["times"], float)
        counts = np.full((edges.size - 1, times.size), np.nan)
        with open(json_path.parent / info["counts_csv"], newline="") as fh:
            for row in csv.DictReader(fh):
                counts[int(row["bin"]), int(row["time_index"])] = float(row["count"])
    except (KeyError, ValueError, IndexError, json.JSONDecodeError) as exc:
        raise InvalidInputError(f"malformed observation files: {exc}") from exc
    if np.isnan(counts).any():
        raise InvalidInputError("observation CSV is missing entries")
    return ObservationSet(counts, edges, times, float(info.get("noise_sigma", 0.0)), info.get("rng_seed")), info


# ---------------------------------------------------------------------------
# Experiment configuration
# ---------------------------------------------------------------------------


@dataclass
class ExperimentConfig:
    """Everything needed to reproduce one refinement study."""

    truth: str = "beta22"
    c_a: float = 1e-6
    c_f: float = 0.1
    c_mu: float = 0.1
    x_max: float = 1.0
    t_f: float = 1.0
    n_steps: int = DEFAULT_STEPS
    n_values: list = field(default_factory=lambda: [5, 10, 15, 20])
    sigma: float = 0.0
    rng_seed: int = 0
    out_dir: str = "out"
    b0_scale: float = 1e3
    b0_rate: float = 1.0
    method: str = "gauss-newton"
    rcond: float = 1e-6
    max_iters: int = 500
    tol_cost: float = 1e-8
    reference_cells: int = REFERENCE_CELLS

    def __post_init__(self):
        self.n_values = [int(n) for n in self.n_values]
        if not self.n_values or any(b <= a for a, b in zip(self.n_values, self.n_values[1:])):
            raise InvalidInputError("n_values must be nonempty and increasing")
        if min(self.n_values) < 2:
            raise InvalidInputError("every N must be at least 2")
        if min(self.c_a, self.c_f, self.c_mu, self.sigma) < 0:
            raise InvalidInputError("rates and sigma must be nonnegative")
        if not (self.t_f > 0 and self.x_max > 0):
            raise InvalidInputError("t_f and x_max must be positive")
        if not 0 <= int(self.rng_seed) < 2**64:
            raise InvalidInputError("rng_seed must be an unsigned 64-bit integer")
        if self.n_steps < 1 or self.max_iters < 0:
            raise InvalidInputError("n_steps must be positive")
        MinimizeOptions(method=self.method, rcond=self.rcond)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        if "config" in d and isinstance(d["config"], dict):
            d = d["config"]  # a run manifest
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise InvalidInputError(f"unknown config keys: {sorted(unknown)}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise InvalidInputError(str(exc)) from exc

    def kernels(self) -> KernelSet:
        return builtin_kernels(self.c_a, self.c_f, self.c_mu, self.x_max)

    def initial_state(self) -> Callable:
        return exponential_initial_state(self.b0_scale, self.b0_rate)

    def options(self) -> MinimizeOptions:
        return MinimizeOptions(method=self.method, rcond=self.rcond, max_iters=self.max_iters,
                               tol_cost=self.tol_cost)


def load_config(path) -> ExperimentConfig:
    """Read a JSON config or a run manifest."""
    try:
        data = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise InvalidInputError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise InvalidInputError("config must be a JSON object")
    return ExperimentConfig.from_dict(data)


# ---------------------------------------------------------------------------
# Study runner
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RunResult:
    curve: ErrorCurve
    out_dir: Path
    files: tuple

    @property
    def ok(self) -> bool:
        return not self.curve.failures


def write_error_surface(curve: ErrorCurve, reference: ConditionalMeasure, path) -> None:
    """``|F0 - F_N|`` at every reference lattice point ``x < y`` for each leg."""
    X, Y = np.meshgrid(reference.atoms, reference.parent_grid.right)
    below = X < Y
    x, y = X[below], Y[below]
    f0 = cdf(reference, x, y)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["N", "x", "y", "abs_error"])
        for n, est in zip(curve.n_values, curve.estimates):
            if est is None:
                continue
            err = np.abs(cdf(est.measure, x, y) - f0)
            for a, b, e in zip(x, y, err):
                w.writerow([n, "%.17g" % a, "%.17g" % b, "%.17g" % e])


def run_experiment(config: ExperimentConfig) -> RunResult:
    """Run the refinement study described by ``config`` and write its bundle."""
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    truth = truth_measure(config.truth)
    kernels = config.kernels()
    curve = refinement_study(truth, config.n_values, config.sigma, config.rng_seed,
                             kernels=kernels, initial_state=config.initial_state(), t_f=config.t_f,
                             n_steps=config.n_steps, options=config.options(),
                             reference_cells=config.reference_cells)
    files = []
    legs = []
    for n, est, err in zip(curve.n_values, curve.estimates, curve.errors):
        grid = Grid(n, config.x_max)
        leg = {"N": n, "noise_seed": leg_seed(config.rng_seed, n), "n_times": n + EXTRA_TIMES,
               "seed_measure": to_json_dict(uniform(grid, grid))}
        if est is not None:
            save_measure(est.measure, out / f"estimate_N{n}.json")
            write_history(est, out / f"estimate_N{n}_history.csv")
            files += [f"estimate_N{n}.json", f"estimate_N{n}_history.csv"]
            leg.update(iterations=est.iterations, converged=est.converged, reason=est.reason,
                       cost="%.17g" % est.cost, error="%.17g" % err)
        legs.append(leg)
    write_error_curve(curve, out / "error_curve.csv")
    ref = Grid(config.reference_cells, config.x_max)
    write_error_surface(curve, truth(ref, ref), out / "error_surface.csv")
    files += ["error_curve.csv", "error_surface.csv", "manifest.json"]
    manifest = {
        "manifest_version": MANIFEST_VERSION,
        "config": asdict(config),
        "sample_times": "N + 40 equally spaced on (0, t_f]",
        "observation_bins": "solver grid cells",
        "noise": "gaussian, numpy default_rng (PCG64) seeded per leg from SeedSequence([rng_seed, N])",
        "initial_state": "b0_scale * exp(-b0_rate * x)",
        "error": "max |F0 - F_N| over the lattice points of F_N on the reference grid",
        "legs": legs,
        "failures": [{"N": n, "message": m} for n, m in curve.failures],
        "files": files,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    return RunResult(curve, out, tuple(files))
