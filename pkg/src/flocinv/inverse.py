"""Least-squares identification of the post-fragmentation measure.

The unknown is the weight array of a :class:`ConditionalMeasure` on the
solver grid.  Each row lives on a probability simplex.  Two optimizers share
one interface: projected gradient descent with finite-difference gradients,
and a projected Gauss-Newton iteration driven by the exact derivative of the
discrete forward map.  Perturbed or linearized forward solves always run as a
single batched RK4 integration.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Optional, Sequence

import numpy as np

from .domain import Grid, KernelSet, SizeDistribution, default_kernels, project
from .errors import InvalidInputError, NumericalFailure
from .forward import (DEFAULT_STEPS, ObservationSet, Scheme, add_noise, bin_matrix,
                      integrate, partial_moments, solve_batch, solve_tangent,
                      step_times, time_matrix)
from .measures import ConditionalMeasure, admissible_mask, lattice_error, uniform

logger = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# Simplex projection
# ---------------------------------------------------------------------------


def simplex_project(v) -> np.ndarray:
    """Euclidean projection of ``v`` onto ``{w >= 0, sum(w) = 1}``.

    Sort-based exact algorithm: find the threshold ``tau`` with
    ``sum(max(v - tau, 0)) = 1``.
    """
    v = np.asarray(v, dtype=float)
    if v.ndim != 1 or v.size == 0:
        raise InvalidInputError("simplex_project needs a nonempty vector")
    return project_rows(v[None, :])[0]


def project_rows(V: np.ndarray, mask: Optional[np.ndarray] = None) -> np.ndarray:
    """Project each row of ``V`` (restricted to ``mask``) onto the simplex."""
    V = np.asarray(V, dtype=float)
    if mask is None:
        mask = np.ones(V.shape, dtype=bool)
    n = mask.sum(axis=-1, keepdims=True)
    # masked entries sort last and never enter the active set
    U = -np.sort(-np.where(mask, V, -np.inf), axis=-1)
    css = np.cumsum(np.where(np.isfinite(U), U, 0.0), axis=-1) - 1.0
    ind = np.arange(1, V.shape[-1] + 1)
    cond = (U - css / ind > 0) & (ind <= n)
    rho = np.maximum(cond.sum(axis=-1, keepdims=True), 1)
    tau = np.take_along_axis(css, rho - 1, axis=-1) / rho
    return np.where(mask, np.maximum(V - tau, 0.0), 0.0)


# ---------------------------------------------------------------------------
# Problem description
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class InverseSetup:
    """Everything the cost needs except the measure itself."""

    grid: Grid
    kernels: KernelSet
    b0: SizeDistribution
    t_f: float
    observations: ObservationSet
    n_steps: int = DEFAULT_STEPS
    include_diagonal: bool = True

    def __post_init__(self):
        obs = self.observations
        if self.b0.grid != self.grid:
            raise InvalidInputError("initial state is not on the setup grid")
        if self.t_f <= 0:
            raise InvalidInputError("t_f must be positive")
        tol = 1e-12 * max(1.0, self.t_f)
        if np.any(obs.times < -tol) or np.any(obs.times > self.t_f + tol):
            raise InvalidInputError("observation times must lie in [0, t_f]")
        bin_matrix(self.grid, obs.bin_edges)

    @property
    def bin_edges(self) -> np.ndarray:
        return self.observations.bin_edges

    @property
    def sample_times(self) -> np.ndarray:
        return self.observations.times

    @cached_property
    def scheme(self) -> Scheme:
        return Scheme(self.grid, self.kernels, self.include_diagonal)

    @cached_property
    def mask(self) -> np.ndarray:
        return admissible_mask(self.grid, self.grid)

    @cached_property
    def _observe(self):
        B = bin_matrix(self.grid, self.bin_edges)
        T = time_matrix(step_times(self.t_f, self.n_steps), self.sample_times)
        return B, T

    def predict(self, weights: np.ndarray) -> np.ndarray:
        """Model counts ``(B, N_x, N_t)`` for a stack of weight arrays."""
        W = np.asarray(weights, dtype=float)
        single = W.ndim == 2
        W = W[None] if single else W
        states = solve_batch(self.scheme, self.b0.alpha, W, self.t_f, self.n_steps)
        B, T = self._observe
        counts = np.einsum("ts,bsn,jn->bjt", T, states, B)
        return counts[0] if single else counts

    def residuals(self, weights: np.ndarray) -> np.ndarray:
        return self.predict(weights) - self.observations.counts

    def jacobian(self, weights: np.ndarray, directions: np.ndarray):
        """Residual vector and its exact derivative along weight directions.

        Returns ``(r, J)`` with ``r`` of length ``N_x * N_t`` and ``J`` of
        shape ``(N_x * N_t, P)`` for ``P`` directions.
        """
        states, sens = solve_tangent(self.scheme, self.b0.alpha, weights, directions,
                                     self.t_f, self.n_steps)
        B, T = self._observe
        r = np.einsum("ts,sn,jn->jt", T, states, B) - self.observations.counts
        J = np.einsum("ts,psn,jn->jtp", T, sens, B)
        return r.ravel(), J.reshape(r.size, -1)


# ---------------------------------------------------------------------------
# Cost and gradient
# ---------------------------------------------------------------------------


def _check_feasible(F: ConditionalMeasure, setup: InverseSetup) -> None:
    if F.daughter_grid != setup.grid or F.parent_grid != setup.grid:
        raise InvalidInputError("measure is not on the setup grid")


def _costs(setup: InverseSetup, weights: np.ndarray) -> np.ndarray:
    r = setup.residuals(weights)
    return np.einsum("bjt,bjt->b", r, r)


def cost(F: ConditionalMeasure, setup: InverseSetup) -> float:
    """Sum of squared differences between model and observed bin counts."""
    _check_feasible(F, setup)
    try:
        return float(_costs(setup, F.weights[None])[0])
    except NumericalFailure as exc:
        exc.measure = F
        raise


def default_step(weights: np.ndarray) -> float:
    return 1e-5 * max(1.0, float(np.max(np.abs(weights))))


def _gradient(setup: InverseSetup, W: np.ndarray, h: float) -> np.ndarray:
    mask = setup.mask
    rows, cols = np.nonzero(mask)
    # single-atom rows cannot move on their simplex
    free = mask.sum(axis=1)[rows] > 1
    rows, cols = rows[free], cols[free]
    grad = np.zeros_like(W)
    if rows.size == 0:
        return grad
    stack = np.repeat(W[None], 2 * rows.size, axis=0)
    idx = np.arange(rows.size)
    for sign, offset in ((1.0, 0), (-1.0, rows.size)):
        bumped = W[rows].copy()
        bumped[idx, cols] += sign * h
        if np.any(bumped[idx, cols] == W[rows, cols]):
            raise NumericalFailure(f"finite-difference step h={h!r} is below weight resolution")
        stack[offset + idx, rows] = project_rows(bumped, mask[rows])
    J = _costs(setup, stack)
    grad[rows, cols] = (J[: rows.size] - J[rows.size:]) / (2.0 * h)
    return grad


def cost_gradient(F: ConditionalMeasure, setup: InverseSetup, h: Optional[float] = None) -> np.ndarray:
    """Central-difference gradient of :func:`cost` in the measure weights.

    Each perturbed row is projected back onto its simplex before the forward
    solve, so the result is a derivative along the feasible set.  Entries
    above the diagonal are zero.
    """
    _check_feasible(F, setup)
    h = default_step(F.weights) if h is None else h
    if not h > 0:
        raise InvalidInputError("h must be positive")
    return _gradient(setup, np.array(F.weights), h)


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------


METHODS = ("gauss-newton", "projected-gradient")
# Levenberg-Marquardt damping, relative to the largest squared singular value
INITIAL_DAMPING = 1e-6
MIN_DAMPING = 1e-14
STALE_STEPS = 3


@dataclass
class MinimizeOptions:
    """Stopping rules and step settings for :func:`minimize`.

    ``method`` picks the search direction.  ``"projected-gradient"`` uses the
    finite-difference gradient with an Armijo line search that starts from
    ``initial_step`` (``None`` moves the largest weight by 0.1) and, when
    ``spectral`` is set, from the Barzilai-Borwein step afterwards.
    ``"gauss-newton"`` uses the exact residual Jacobian and a truncated-SVD
    step that discards singular values below ``rcond`` times the largest;
    the trial point is projected back onto the row simplices and halved
    until the Armijo condition holds.
    """

    method: str = "gauss-newton"
    initial_step: Optional[float] = None
    tol_cost: float = 1e-8
    tol_grad: float = 1e-6
    max_iters: int = 500
    armijo: float = 1e-4
    shrink: float = 0.5
    max_backtracks: int = 60
    spectral: bool = True
    rcond: float = 1e-6
    h: Optional[float] = None
    callback: Optional[Callable] = field(default=None, repr=False)

    def __post_init__(self):
        if self.method not in METHODS:
            raise InvalidInputError(f"method must be one of {METHODS}, got {self.method!r}")
        if not 0 < self.shrink < 1:
            raise InvalidInputError("shrink must lie in (0, 1)")
        if not 0 < self.rcond < 1:
            raise InvalidInputError("rcond must lie in (0, 1)")
        if self.max_iters < 0 or self.max_backtracks < 1:
            raise InvalidInputError("iteration limits must be positive")


@dataclass(frozen=True)
class Estimate:
    """Result of :func:`minimize`."""

    measure: ConditionalMeasure
    cost: float
    iterations: int
    converged: bool
    history: tuple
    reason: str = ""


def _damped_steps(r: np.ndarray, J: np.ndarray, rcond: float, damping: np.ndarray) -> np.ndarray:
    """Truncated-SVD Levenberg-Marquardt steps, one row per damping value."""
    U, S, Vt = np.linalg.svd(J, full_matrices=False)
    if S.size == 0 or S[0] == 0:
        return np.zeros((damping.size, J.shape[1]))
    keep = S > rcond * S[0]
    U, S, Vt = U[:, keep], S[keep], Vt[keep]
    filt = S / (S**2 + damping[:, None] * S[0] ** 2)
    return -(filt * (U.T @ r)) @ Vt


def minimize(setup: InverseSetup, seed_measure: ConditionalMeasure,
             options: Optional[MinimizeOptions] = None) -> Estimate:
    """Least squares over the product of row simplices.

    Stops when the relative cost decrease of an accepted step falls below
    ``tol_cost``, when the projected-gradient mapping ``|P(p - g) - p|_inf``
    falls below ``tol_grad``, when no trial step decreases the cost, or after
    ``max_iters`` iterations.  Every accepted step lowers the cost, so the
    returned iterate is the best one seen.
    """
    opts = options or MinimizeOptions()
    _check_feasible(seed_measure, setup)
    W = np.array(seed_measure.weights)
    J = float(_costs(setup, W[None])[0])
    if J == 0.0:
        return Estimate(seed_measure, 0.0, 0, True, (J,), "zero cost")
    run = _run_gauss_newton if opts.method == "gauss-newton" else _run_projected_gradient
    W, J, it, converged, reason, history = run(setup, W, J, opts)
    return Estimate(seed_measure.with_weights(W), J, it, converged, tuple(history), reason)


def _accept(opts: MinimizeOptions, it: int, W: np.ndarray, J: float, step: float) -> None:
    if opts.callback is not None:
        opts.callback(it, W, J)
    logger.debug("iter %d cost %.6g step %.3g", it, J, step)


def _run_projected_gradient(setup, W, J, opts):
    mask = setup.mask
    history = [J]
    step = opts.initial_step
    g = _gradient(setup, W, opts.h or default_step(W))
    converged, reason, it = False, "max_iters", 0
    for it in range(1, opts.max_iters + 1):
        if np.max(np.abs(project_rows(W - g, mask) - W)) < opts.tol_grad:
            converged, reason, it = True, "gradient mapping", it - 1
            break
        if step is None:
            step = 0.1 / max(float(np.max(np.abs(g))), 1e-300)
        s = step
        accepted = False
        for _ in range(opts.max_backtracks):
            W_new = project_rows(W - s * g, mask)
            J_new = float(_costs(setup, W_new[None])[0])
            if J_new <= J + opts.armijo * float(np.sum(g * (W_new - W))):
                accepted = True
                break
            s *= opts.shrink
        if not accepted or J_new > J:
            converged, reason, it = True, "line search stalled", it - 1
            break
        decrease = (J - J_new) / J
        g_new = _gradient(setup, W_new, opts.h or default_step(W_new))
        if opts.spectral:
            dW, dg = W_new - W, g_new - g
            curv = float(np.sum(dW * dg))
            step = float(np.sum(dW * dW)) / curv if curv > 0 else s * 2.0
        else:
            step = s
        W, J, g = W_new, J_new, g_new
        history.append(J)
        _accept(opts, it, W, J, s)
        if J == 0.0 or decrease < opts.tol_cost:
            converged, reason = True, "cost decrease"
            break
    return W, J, it, converged, reason, history


def _free_entries(W: np.ndarray, g: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Admissible weights not held at zero by their row's KKT multiplier."""
    pos = mask & (W > 0)
    lam = np.where(pos, g, 0.0).sum(axis=1) / np.maximum(pos.sum(axis=1), 1)
    return pos | (mask & (g < lam[:, None]))


def _reduce(jac: np.ndarray, rows: np.ndarray, cols: np.ndarray, free: np.ndarray):
    """Jacobian along ``e_lm - mean(free part of row l)`` for free ``(l, m)``.

    ``jac`` holds derivatives along the unit weights listed by ``rows, cols``.
    Returns the reduced Jacobian and a function mapping reduced steps back to
    weight arrays.
    """
    sel = free[rows, cols]
    count = free.sum(axis=1)
    sel &= count[rows] > 1
    idx = np.nonzero(sel)[0]
    r_sel = rows[idx]
    # per-row mean of the free columns
    R = (r_sel[:, None] == np.arange(free.shape[0])[None, :]).astype(float)
    means = (jac[:, idx] @ R) / np.maximum(count, 1)
    reduced = jac[:, idx] - means[:, r_sel]

    def lift(d: np.ndarray) -> np.ndarray:
        dW = np.zeros(free.shape)
        dW[r_sel, cols[idx]] = d
        shift = (d @ R) / np.maximum(count, 1)
        return dW - np.where(free & (count[:, None] > 1), shift[:, None], 0.0)

    return reduced, lift


def _run_gauss_newton(setup, W, J, opts):
    mask = setup.mask
    history = [J]
    converged, reason, it = False, "max_iters", 0
    # trial dampings are evaluated in batches of this many decades
    chunk = 8
    damping, stale = INITIAL_DAMPING, 0
    rows, cols = np.nonzero(mask)
    E = np.zeros((rows.size,) + mask.shape)
    E[np.arange(rows.size), rows, cols] = 1.0
    for it in range(1, opts.max_iters + 1):
        r, jac = setup.jacobian(W, E)
        g = np.zeros_like(W)
        g[rows, cols] = 2.0 * (jac.T @ r)
        if np.max(np.abs(project_rows(W - g, mask) - W)) < opts.tol_grad:
            converged, reason, it = True, "gradient mapping", it - 1
            break
        reduced, lift = _reduce(jac, rows, cols, _free_entries(W, g, mask))
        if reduced.shape[1] == 0:
            converged, reason, it = True, "no free weights", it - 1
            break
        J_new = None
        for start in range(0, opts.max_backtracks, chunk):
            lams = damping * 10.0 ** np.arange(start, min(start + chunk, opts.max_backtracks))
            steps = _damped_steps(r, reduced, opts.rcond, lams)
            trials = project_rows(W[None] + np.stack([lift(d) for d in steps]), mask)
            costs = _costs(setup, trials)
            slopes = np.einsum("ij,bij->b", g, trials - W[None])
            ok = np.nonzero((costs < J) & (costs <= J + opts.armijo * slopes))[0]
            if ok.size:
                k = int(ok[0])
                J_new, W_new, lam = float(costs[k]), trials[k], float(lams[k])
                break
        if J_new is None:
            converged, reason, it = True, "line search stalled", it - 1
            break
        damping = max(lam / 100.0, MIN_DAMPING)
        small_step = lam <= 10 * MIN_DAMPING
        decrease = (J - J_new) / J
        W, J = W_new, J_new
        history.append(J)
        _accept(opts, it, W, J, lam)
        # one heavily damped step says little about stationarity, a run of them does
        stale = stale + 1 if decrease < opts.tol_cost else 0
        if J == 0.0 or (stale and small_step) or stale >= STALE_STEPS:
            converged, reason = True, "cost decrease"
            break
    return W, J, it, converged, reason, history


# ---------------------------------------------------------------------------
# Refinement study
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ErrorCurve:
    """Uniform error of each estimator ``F_N`` against the truth.

    ``estimates`` holds the per-N :class:`Estimate` (``None`` for a failed
    leg); ``failures`` lists ``(N, message)`` for those legs.
    """

    n_values: tuple
    errors: tuple
    costs: tuple
    subsequence_flags: tuple
    failures: tuple = ()
    estimates: tuple = ()

    def __post_init__(self):
        if not (len(self.n_values) == len(self.errors) == len(self.costs) == len(self.subsequence_flags)):
            raise InvalidInputError("error curve columns differ in length")
        kept = [e for e, f in zip(self.errors, self.subsequence_flags) if f]
        if any(b >= a for a, b in zip(kept, kept[1:])):
            raise InvalidInputError("flagged errors are not strictly decreasing")


def flag_decreasing(errors: Sequence[float]) -> list[bool]:
    """Greedy scan keeping each finite error strictly below the last kept one."""
    flags, last = [], np.inf
    for e in errors:
        keep = bool(np.isfinite(e) and e < last)
        flags.append(keep)
        if keep:
            last = e
    return flags


REFERENCE_CELLS = 240
EXTRA_TIMES = 40


def default_initial_state(x):
    return 1e3 * np.exp(-x)


def leg_seed(rng_seed, n: int) -> Optional[int]:
    """Noise seed for the size-``n`` leg of a study seeded with ``rng_seed``."""
    if rng_seed is None:
        return None
    return int(np.random.SeedSequence([int(rng_seed), int(n)]).generate_state(1, np.uint64)[0])


def sample_times(n_times: int, t_f: float) -> np.ndarray:
    """``n_times`` equally spaced times on ``(0, t_f]``."""
    return t_f * np.arange(1, n_times + 1) / n_times


def study_setup(truth: Callable[[Grid, Grid], ConditionalMeasure], n: int, kernels: KernelSet,
                initial_state: Callable = default_initial_state, t_f: float = 1.0,
                n_steps: int = DEFAULT_STEPS, sigma: float = 0.0, rng_seed=None,
                include_diagonal: bool = True) -> InverseSetup:
    """Inverse problem of size ``n`` with data simulated from ``truth`` on the same grid."""
    grid = Grid(n, kernels.x_max)
    b0 = project(initial_state, grid)
    traj = integrate(b0, truth(grid, grid), kernels, t_f, n_steps, include_diagonal=include_diagonal)
    obs = partial_moments(traj, grid.nodes, sample_times(n + EXTRA_TIMES, t_f))
    obs = add_noise(obs, sigma, rng_seed)
    return InverseSetup(grid, kernels, b0, t_f, obs, n_steps, include_diagonal)


def refinement_study(truth: Callable[[Grid, Grid], ConditionalMeasure], n_values: Sequence[int],
                     sigma: float = 0.0, rng_seed=None, *, kernels: Optional[KernelSet] = None,
                     initial_state: Callable = default_initial_state, t_f: float = 1.0,
                     n_steps: int = DEFAULT_STEPS, options: Optional[MinimizeOptions] = None,
                     reference_cells: int = REFERENCE_CELLS) -> ErrorCurve:
    """Estimate the truth on a sequence of grids and record the errors.

    ``truth(daughter_grid, parent_grid)`` discretizes the true measure.  Each
    leg simulates data from the truth on its own grid, minimizes from the
    uniform seed, and measures :func:`lattice_error` against the truth on a
    ``reference_cells`` grid, which must be a common refinement of every
    leg.  A failing leg is recorded with error ``nan`` and the study goes on.
    """
    n_values = [int(n) for n in n_values]
    if not n_values or any(n < 2 for n in n_values) or any(b <= a for a, b in zip(n_values, n_values[1:])):
        raise InvalidInputError("n_values must be increasing integers >= 2")
    kernels = kernels or default_kernels()
    if any(reference_cells % n for n in n_values):
        raise InvalidInputError(f"reference grid of {reference_cells} cells does not refine every N")
    ref = Grid(reference_cells, kernels.x_max)
    reference = truth(ref, ref)
    errors, costs, failures, estimates = [], [], [], []
    for n in n_values:
        try:
            setup = study_setup(truth, n, kernels, initial_state, t_f, n_steps, sigma, leg_seed(rng_seed, n))
            est = minimize(setup, uniform(setup.grid, setup.grid), options)
            errors.append(lattice_error(est.measure, reference))
            costs.append(est.cost)
            estimates.append(est)
            logger.info("N=%d cost %.3g error %.4g (%s)", n, est.cost, errors[-1], est.reason)
        except (NumericalFailure, InvalidInputError) as exc:
            logger.warning("N=%d failed: %s", n, exc)
            errors.append(float("nan"))
            costs.append(float("nan"))
            failures.append((n, str(exc)))
            estimates.append(None)
    return ErrorCurve(tuple(n_values), tuple(errors), tuple(costs), tuple(flag_decreasing(errors)),
                      tuple(failures), tuple(estimates))


def write_error_curve(curve: ErrorCurve, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["N", "error", "cost", "flagged"])
        for n, e, c, f in zip(curve.n_values, curve.errors, curve.costs, curve.subsequence_flags):
            w.writerow([n, "%.17g" % e, "%.17g" % c, int(f)])


def read_error_curve(path) -> ErrorCurve:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return ErrorCurve(tuple(int(r["N"]) for r in rows), tuple(float(r["error"]) for r in rows),
                      tuple(float(r["cost"]) for r in rows), tuple(bool(int(r["flagged"])) for r in rows))


def write_history(est: Estimate, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iter", "cost"])
        for i, c in enumerate(est.history):
            w.writerow([i, "%.17g" % c])
