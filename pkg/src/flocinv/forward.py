"""Semi-discrete flocculation model: aggregation, breakage and removal.

The right-hand side acts on cell averages ``alpha`` with kernels evaluated at
the cell right endpoints ``x_j = j * dx``:

* aggregation gain ``1/2 sum_{j<i} k_a(x_j, x_{i-j}) a_j a_{i-j} dx`` and loss
  ``a_i sum_{j<=N-i} k_a(x_i, x_j) a_j dx``;
* breakage gain ``sum_{j>=i} w[j, i] k_f(x_j) a_j`` where ``w[j, i]`` is the
  mass that a parent in cell ``j`` puts on daughter cell ``i``, and loss
  ``1/2 k_f(x_i) a_i``;
* removal ``-mu(x_i) a_i``.

The parent-equals-daughter cell (``j = i``) is included in the breakage gain
by default so that each fragmentation event returns exactly one unit of row
mass; pass ``include_diagonal=False`` for the strictly-upper sum.

Everything is vectorized over a leading batch axis so that many measures can
be integrated in one pass (the inverse solver relies on this).
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import sparse

from .domain import Grid, KernelSet, SizeDistribution, check_nonnegative
from .errors import IntegrationError, InvalidInputError
from .measures import ConditionalMeasure

DEFAULT_STEPS = 200


class Scheme:
    """Precomputed discrete operators for one grid and kernel set."""

    def __init__(self, grid: Grid, kernels: KernelSet, include_diagonal: bool = True):
        if abs(kernels.x_max - grid.x_max) > 1e-12 * grid.x_max:
            raise InvalidInputError("kernels and grid describe different size domains")
        n = grid.n_cells
        self.grid = grid
        self.kernels = kernels
        self.include_diagonal = include_diagonal
        self.K, self.kf, self.mu = kernels.matrices(grid)
        a, b = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
        # 1-based indices j, k pair into cell j + k when j + k <= N
        gain = (a + b + 1) < n
        self._ga, self._gb = a[gain], b[gain]
        self._gk = self.K[self._ga, self._gb]
        self._gather = sparse.csr_matrix(
            (np.full(self._ga.size, 0.5 * grid.dx), (self._ga + self._gb + 1, np.arange(self._ga.size))),
            shape=(n, self._ga.size))
        self.K_loss = np.where((a + b) <= n - 2, self.K, 0.0) * grid.dx
        self.break_mask = (a >= b) if include_diagonal else (a > b)
        self.decay = 0.5 * self.kf + self.mu

    # -- pieces -----------------------------------------------------------
    def aggregation(self, alpha: np.ndarray) -> np.ndarray:
        alpha = np.atleast_2d(alpha)
        prod = self._gk * alpha[:, self._ga] * alpha[:, self._gb]
        gain = (self._gather @ prod.T).T
        return gain - alpha * (alpha @ self.K_loss.T)

    def breakage_operator(self, weights: np.ndarray) -> np.ndarray:
        """``w[j, i] * k_f(x_j)`` restricted to admissible parent/daughter pairs."""
        w = np.asarray(weights, dtype=float)
        return np.where(self.break_mask, w, 0.0) * self.kf[:, None]

    def breakage_removal(self, alpha: np.ndarray, wk: np.ndarray) -> np.ndarray:
        alpha = np.atleast_2d(alpha)
        if wk.ndim == 2:
            gain = alpha @ wk
        else:
            gain = np.einsum("bji,bj->bi", wk, alpha)
        return gain - self.decay * alpha

    def __call__(self, alpha: np.ndarray, wk: np.ndarray) -> np.ndarray:
        return self.aggregation(alpha) + self.breakage_removal(alpha, wk)

    def _bilinear(self, u: np.ndarray, v: np.ndarray) -> np.ndarray:
        gain = (self._gather @ (self._gk * u[:, self._ga] * v[:, self._gb]).T).T
        return gain - u * (v @ self.K_loss.T)

    def tangent(self, alpha: np.ndarray, d_alpha: np.ndarray, wk: np.ndarray,
                d_wk: np.ndarray) -> np.ndarray:
        """Directional derivative of the right-hand side.

        ``alpha`` is one state ``(N,)``, ``d_alpha`` a stack ``(P, N)`` of state
        perturbations paired with breakage-operator perturbations ``d_wk``
        ``(P, N, N)``.
        """
        a = np.broadcast_to(alpha, d_alpha.shape)
        return (self._bilinear(a, d_alpha) + self._bilinear(d_alpha, a)
                + d_alpha @ wk + np.einsum("j,pji->pi", alpha, d_wk) - self.decay * d_alpha)


def _check_measure(grid: Grid, gamma: ConditionalMeasure) -> None:
    if gamma.daughter_grid != grid or gamma.parent_grid != grid:
        raise InvalidInputError(
            f"measure grids ({gamma.daughter_grid.n_cells}x{gamma.parent_grid.n_cells}) "
            f"do not match the solution grid ({grid.n_cells} cells)")


def _check_state(b: SizeDistribution, k: KernelSet) -> None:
    if abs(k.x_max - b.grid.x_max) > 1e-12 * b.grid.x_max:
        raise InvalidInputError("kernels and state describe different size domains")


def aggregation_rhs(b: SizeDistribution, k: KernelSet) -> np.ndarray:
    """Projected aggregation operator for state ``b``."""
    _check_state(b, k)
    return Scheme(b.grid, k).aggregation(b.alpha)[0]


def breakage_removal_rhs(b: SizeDistribution, gamma: ConditionalMeasure, k: KernelSet,
                         include_diagonal: bool = True) -> np.ndarray:
    """Projected breakage plus removal operator for state ``b``."""
    _check_state(b, k)
    _check_measure(b.grid, gamma)
    s = Scheme(b.grid, k, include_diagonal)
    return s.breakage_removal(b.alpha, s.breakage_operator(gamma.weights))[0]


def rhs(b: SizeDistribution, gamma: ConditionalMeasure, k: KernelSet,
        include_diagonal: bool = True) -> np.ndarray:
    """Full semi-discrete right-hand side."""
    _check_state(b, k)
    _check_measure(b.grid, gamma)
    s = Scheme(b.grid, k, include_diagonal)
    return s(b.alpha, s.breakage_operator(gamma.weights))[0]


# ---------------------------------------------------------------------------
# Time integration
# ---------------------------------------------------------------------------


def rk4(f, y0: np.ndarray, t_f: float, n_steps: int, stride: int = 1) -> np.ndarray:
    """Classical fixed-step RK4 for the autonomous system ``y' = f(y)``.

    Returns an array with the initial value and every ``stride``-th step
    stacked on axis ``-2`` (the final step is always kept).

    Raises
    ------
    IntegrationError
        When a non-finite state appears.
    """
    y = np.array(y0, dtype=float)
    if n_steps == 0:
        return y[..., None, :].copy()
    h = t_f / n_steps
    keep = [y]
    # overflow is reported through IntegrationError below
    with np.errstate(over="ignore", invalid="ignore"):
        for step in range(1, n_steps + 1):
            k1 = f(y)
            k2 = f(y + 0.5 * h * k1)
            k3 = f(y + 0.5 * h * k2)
            k4 = f(y + h * k3)
            y = y + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
            if not np.all(np.isfinite(y)):
                raise IntegrationError("non-finite state in forward solve", step)
            if step % stride == 0 or step == n_steps:
                keep.append(y)
    return np.stack(keep, axis=-2)


def step_times(t_f: float, n_steps: int, stride: int = 1) -> np.ndarray:
    if n_steps == 0:
        return np.array([0.0])
    idx = list(range(0, n_steps + 1, stride))
    if idx[-1] != n_steps:
        idx.append(n_steps)
    t = np.asarray(idx, dtype=float) * (t_f / n_steps)
    t[-1] = t_f
    return t


def _validate_time(t_f: float, n_steps: int) -> int:
    if not np.isfinite(t_f) or t_f < 0:
        raise InvalidInputError("t_f must be nonnegative")
    if t_f == 0:
        return 0
    if int(n_steps) != n_steps or n_steps < 1:
        raise InvalidInputError("n_steps must be a positive integer")
    return int(n_steps)


def solve_batch(scheme: Scheme, alpha0: np.ndarray, weights: np.ndarray,
                t_f: float, n_steps: int) -> np.ndarray:
    """Integrate one initial state under a stack of measures.

    Parameters
    ----------
    weights:
        ``(B, N, N)`` stack of measure weight arrays.

    Returns
    -------
    ndarray
        ``(B, n_steps + 1, N)`` states at every step.
    """
    n_steps = _validate_time(t_f, n_steps)
    wk = scheme.breakage_operator(weights)
    y0 = np.broadcast_to(alpha0, (wk.shape[0], scheme.grid.n_cells))
    return rk4(lambda a: scheme(a, wk), y0, t_f, n_steps)


def solve_tangent(scheme: Scheme, alpha0: np.ndarray, weights: np.ndarray,
                  directions: np.ndarray, t_f: float, n_steps: int):
    """RK4 solve together with its exact derivative along weight directions.

    The derivative is that of the discrete RK4 map itself, so it matches
    finite differences of :func:`solve_batch` to roundoff.

    Returns
    -------
    states : ndarray ``(n_steps + 1, N)``
    sens : ndarray ``(P, n_steps + 1, N)``
    """
    n_steps = _validate_time(t_f, n_steps)
    wk = scheme.breakage_operator(weights)
    d_wk = scheme.breakage_operator(directions)
    f = lambda a: scheme(a, wk)[0]
    df = lambda a, da: scheme.tangent(a, da, wk, d_wk)
    y = np.array(alpha0, dtype=float)
    dy = np.zeros((d_wk.shape[0], y.size))
    ys, dys = [y], [dy]
    h = t_f / n_steps if n_steps else 0.0
    for step in range(1, n_steps + 1):
        k1, d1 = f(y), df(y, dy)
        y2, dy2 = y + 0.5 * h * k1, dy + 0.5 * h * d1
        k2, d2 = f(y2), df(y2, dy2)
        y3, dy3 = y + 0.5 * h * k2, dy + 0.5 * h * d2
        k3, d3 = f(y3), df(y3, dy3)
        y4, dy4 = y + h * k3, dy + h * d3
        k4, d4 = f(y4), df(y4, dy4)
        y = y + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        dy = dy + (h / 6.0) * (d1 + 2.0 * d2 + 2.0 * d3 + d4)
        if not (np.all(np.isfinite(y)) and np.all(np.isfinite(dy))):
            raise IntegrationError("non-finite state in tangent solve", step)
        ys.append(y)
        dys.append(dy)
    return np.stack(ys), np.stack(dys, axis=1)


@dataclass(frozen=True)
class Trajectory:
    """States of the semi-discrete model at increasing times in ``[0, t_f]``."""

    grid: Grid
    times: np.ndarray
    alphas: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.times, dtype=float)
        a = np.asarray(self.alphas, dtype=float)
        if t.ndim != 1 or t[0] != 0 or np.any(np.diff(t) <= 0):
            raise InvalidInputError("trajectory times must start at 0 and increase strictly")
        if a.shape != (t.size, self.grid.n_cells):
            raise InvalidInputError("trajectory states do not match times and grid")

    @property
    def t_f(self) -> float:
        return float(self.times[-1])

    @property
    def states(self) -> list[SizeDistribution]:
        return [SizeDistribution(self.grid, a, check_sign=False) for a in self.alphas]

    def final(self) -> SizeDistribution:
        return SizeDistribution(self.grid, self.alphas[-1], check_sign=False)

    def total_number(self) -> np.ndarray:
        return self.grid.dx * self.alphas.sum(axis=1)

    def first_moment(self) -> np.ndarray:
        """Exact ``int x b dx`` of each stored piecewise-constant state."""
        return self.grid.dx * self.alphas @ self.grid.midpoints

    def node_moment(self) -> np.ndarray:
        return self.grid.dx * self.alphas @ self.grid.right

    def is_nonnegative(self, rel_floor: float = 1e-10) -> bool:
        return check_nonnegative(self.alphas, rel_floor)


def integrate(b0: SizeDistribution, gamma: ConditionalMeasure, k: KernelSet,
              t_f: float, n_steps: int = DEFAULT_STEPS, stride: int = 1,
              include_diagonal: bool = True) -> Trajectory:
    """Solve the semi-discrete model from ``b0`` with RK4 on a fixed step."""
    _check_state(b0, k)
    _check_measure(b0.grid, gamma)
    n_steps = _validate_time(t_f, n_steps)
    if stride < 1:
        raise InvalidInputError("stride must be positive")
    s = Scheme(b0.grid, k, include_diagonal)
    wk = s.breakage_operator(gamma.weights)
    states = rk4(lambda a: s(a, wk)[0], b0.alpha, t_f, n_steps, stride)
    traj = Trajectory(b0.grid, step_times(t_f, n_steps, stride), states)
    traj.is_nonnegative()
    return traj


@dataclass(frozen=True)
class DiagnosticBounds:
    """Bounding constants of the local Lipschitz estimate for the scheme."""

    c0: float
    c1: float
    c_frag: float
    lipschitz_c: float

    @classmethod
    def from_trajectory(cls, traj: Trajectory, k: KernelSet, gamma: ConditionalMeasure) -> "DiagnosticBounds":
        ka, kf, mu = k.sup_norms
        c0 = float(np.max(np.abs(traj.alphas)))
        c1 = 3.0 * c0 * ka + mu
        c = kf * (0.5 + traj.grid.x_max * gamma.sup_density()) + c1
        return cls(c0, c1, kf, c)


# ---------------------------------------------------------------------------
# Observables
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ObservationSet:
    """Binned counts ``counts[j, i]`` for size bin ``j`` at time ``times[i]``."""

    counts: np.ndarray
    bin_edges: np.ndarray
    times: np.ndarray
    noise_sigma: float = 0.0
    rng_seed: Optional[int] = None

    def __post_init__(self):
        c = np.array(self.counts, dtype=float)
        e = np.array(self.bin_edges, dtype=float)
        t = np.array(self.times, dtype=float)
        if c.shape != (e.size - 1, t.size):
            raise InvalidInputError(f"counts shape {c.shape} does not match {e.size - 1} bins x {t.size} times")
        if not np.all(np.isfinite(c)):
            raise InvalidInputError("observation counts must be finite")
        if np.any(np.diff(e) <= 0):
            raise InvalidInputError("bin edges must increase")
        if self.noise_sigma < 0:
            raise InvalidInputError("noise_sigma must be nonnegative")
        for name, v in (("counts", c), ("bin_edges", e), ("times", t)):
            v.setflags(write=False)
            object.__setattr__(self, name, v)


def bin_matrix(grid: Grid, bin_edges) -> np.ndarray:
    """Overlap lengths between bins and cells, so ``counts = B @ alpha``."""
    e = np.asarray(bin_edges, dtype=float)
    tol = 1e-12 * grid.x_max
    if e.ndim != 1 or e.size < 2 or np.any(np.diff(e) <= 0):
        raise InvalidInputError("bin edges must be an increasing sequence of at least two values")
    if e[0] < -tol or e[-1] > grid.x_max + tol:
        raise InvalidInputError("bin edges must lie within the size domain")
    x = grid.nodes
    lo = np.maximum(e[:-1, None], x[None, :-1])
    hi = np.minimum(e[1:, None], x[None, 1:])
    return np.clip(hi - lo, 0.0, None)


def time_matrix(stored: np.ndarray, sample_times) -> np.ndarray:
    """Linear interpolation weights from stored step times to sample times."""
    s = np.asarray(sample_times, dtype=float)
    tol = 1e-12 * max(1.0, stored[-1])
    if np.any(s < stored[0] - tol) or np.any(s > stored[-1] + tol):
        raise InvalidInputError("sample time outside the trajectory span")
    s = np.clip(s, stored[0], stored[-1])
    T = np.zeros((s.size, stored.size))
    if stored.size == 1:
        T[:, 0] = 1.0
        return T
    hi = np.clip(np.searchsorted(stored, s, side="right"), 1, stored.size - 1)
    lo = hi - 1
    theta = (s - stored[lo]) / (stored[hi] - stored[lo])
    rows = np.arange(s.size)
    T[rows, lo] = 1.0 - theta
    T[rows, hi] += theta
    return T


def partial_moments(traj: Trajectory, bin_edges, sample_times) -> ObservationSet:
    """Integrals of the state over each size bin at each sample time."""
    B = bin_matrix(traj.grid, bin_edges)
    T = time_matrix(traj.times, sample_times)
    counts = B @ (T @ traj.alphas).T
    return ObservationSet(counts, bin_edges, sample_times)


def add_noise(obs: ObservationSet, sigma: float, rng_seed=None) -> ObservationSet:
    """Add i.i.d. ``N(0, sigma^2)`` noise drawn from ``numpy.random.default_rng``.

    ``sigma = 0`` returns the counts unchanged (no draws are made).
    """
    if not sigma >= 0:
        raise InvalidInputError("sigma must be nonnegative")
    counts = np.array(obs.counts)
    if sigma > 0:
        counts = counts + np.random.default_rng(rng_seed).normal(0.0, sigma, counts.shape)
    return ObservationSet(counts, obs.bin_edges, obs.times, float(sigma), rng_seed)


# ---------------------------------------------------------------------------
# CSV export
# ---------------------------------------------------------------------------


def write_trajectory_csv(traj: Trajectory, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t"] + [f"x_{j}" for j in range(1, traj.grid.n_cells + 1)])
        for t, a in zip(traj.times, traj.alphas):
            w.writerow(["%.17g" % t] + ["%.17g" % v for v in a])


def read_trajectory_csv(path, x_max: float) -> Trajectory:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != ["t"] + [f"x_{j}" for j in range(1, len(rows[0]))] or len(rows[0]) < 2:
        raise InvalidInputError(f"{path}: not a trajectory file")
    header = rows[0]
    try:
        body = np.array(rows[1:], dtype=float).reshape(len(rows) - 1, len(header))
    except ValueError as exc:
        raise InvalidInputError(f"{path}: malformed trajectory rows") from exc
    return Trajectory(Grid(len(header) - 1, x_max), body[:, 0], body[:, 1:])
