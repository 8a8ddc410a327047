"""Size-domain grid, piecewise-constant state space and kernel family.

The size domain ``Q = [0, x_max]`` is split into ``N`` equal cells.  A number
density ``b(x)`` is represented by its cell averages ``alpha_j`` (the
orthogonal projection onto piecewise constants).  Kernel functions are
evaluated at the cell right endpoints ``x_j = j * dx`` by the forward scheme.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import InvalidInputError

logger = logging.getLogger(__name__)

#: Relative slack used when deciding ``x + y >= x_max`` on floating-point nodes.
TRUNCATION_RTOL = 1e-12


@dataclass(frozen=True)
class Grid:
    """Uniform partition of ``[0, x_max]`` into ``n_cells`` cells."""

    n_cells: int
    x_max: float

    def __post_init__(self):
        if int(self.n_cells) != self.n_cells or self.n_cells < 1:
            raise InvalidInputError(f"n_cells must be a positive integer, got {self.n_cells!r}")
        if not np.isfinite(self.x_max) or self.x_max <= 0:
            raise InvalidInputError(f"x_max must be positive and finite, got {self.x_max!r}")
        object.__setattr__(self, "n_cells", int(self.n_cells))
        object.__setattr__(self, "x_max", float(self.x_max))

    @property
    def dx(self) -> float:
        return self.x_max / self.n_cells

    @property
    def nodes(self) -> np.ndarray:
        """Partition points ``x_0 = 0, ..., x_N = x_max`` (endpoints exact)."""
        nodes = np.arange(self.n_cells + 1) * self.dx
        nodes[-1] = self.x_max
        return nodes

    @property
    def right(self) -> np.ndarray:
        """Cell right endpoints ``x_1..x_N``; the kernel evaluation points."""
        return self.nodes[1:]

    @property
    def midpoints(self) -> np.ndarray:
        return (np.arange(self.n_cells) + 0.5) * self.dx

    def refine(self, factor: int) -> "Grid":
        return Grid(self.n_cells * factor, self.x_max)


def make_grid(n_cells: int, x_max: float) -> Grid:
    """Return the uniform grid with ``n_cells`` cells on ``[0, x_max]``."""
    return Grid(n_cells, x_max)


@dataclass(frozen=True)
class SizeDistribution:
    """Cell-average coefficients of a number density on ``grid``.

    Negative coefficients are rejected on construction unless
    ``check_sign=False``; solver outputs are built that way and monitored
    separately (see :func:`check_nonnegative`).
    """

    grid: Grid
    alpha: np.ndarray
    check_sign: bool = field(default=True, repr=False, compare=False)

    def __post_init__(self):
        alpha = np.array(self.alpha, dtype=float)
        if alpha.shape != (self.grid.n_cells,):
            raise InvalidInputError(
                f"alpha has shape {alpha.shape}, expected ({self.grid.n_cells},)")
        if not np.all(np.isfinite(alpha)):
            raise InvalidInputError("alpha contains non-finite values")
        if self.check_sign and np.any(alpha < 0):
            raise InvalidInputError("number density coefficients must be nonnegative")
        alpha.setflags(write=False)
        object.__setattr__(self, "alpha", alpha)

    def l1_norm(self) -> float:
        return float(self.grid.dx * np.abs(self.alpha).sum())

    def total_number(self) -> float:
        """Zeroth moment ``int b dx``."""
        return float(self.grid.dx * self.alpha.sum())

    def first_moment(self) -> float:
        """Exact ``int x b dx`` of the piecewise-constant density."""
        return float(self.grid.dx * np.dot(self.grid.midpoints, self.alpha))

    def node_moment(self) -> float:
        """First moment with cell masses lumped at the right endpoints."""
        return float(self.grid.dx * np.dot(self.grid.right, self.alpha))

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        idx = np.clip(np.ceil(x / self.grid.dx).astype(int) - 1, 0, self.grid.n_cells - 1)
        return self.alpha[idx]


def check_nonnegative(alpha: np.ndarray, rel_floor: float = 1e-10) -> bool:
    """Return False (and log a warning) if ``alpha`` dips below ``-rel_floor * max(alpha)``."""
    alpha = np.asarray(alpha)
    floor = -rel_floor * max(float(np.max(alpha)), 0.0)
    low = float(np.min(alpha))
    if low < floor:
        logger.warning("negative density coefficient %.3g below floor %.3g", low, floor)
        return False
    return True


def _evaluate(f: Callable, x: np.ndarray) -> np.ndarray:
    try:
        values = np.asarray(f(x), dtype=float)
        if values.shape != x.shape:
            values = np.broadcast_to(values, x.shape).astype(float)
    except (TypeError, ValueError):
        values = np.vectorize(f, otypes=[float])(x)
    return values


def project(f: Callable, grid: Grid, subsamples: int = 16) -> SizeDistribution:
    """Cell averages of ``f`` by the composite midpoint rule.

    Parameters
    ----------
    f:
        Function of floc volume; called with a numpy array if it accepts one,
        otherwise point by point.
    grid:
        Target grid.
    subsamples:
        Midpoint-rule points per cell.
    """
    if subsamples < 1:
        raise InvalidInputError("subsamples must be at least 1")
    h = grid.dx / subsamples
    x = (np.arange(grid.n_cells * subsamples) + 0.5) * h
    values = _evaluate(f, x)
    if not np.all(np.isfinite(values)):
        raise InvalidInputError("function is not finite on the size domain")
    alpha = values.reshape(grid.n_cells, subsamples).mean(axis=1)
    return SizeDistribution(grid, alpha, check_sign=False)


@dataclass(frozen=True)
class KernelSet:
    """Aggregation kernel ``k_a(x, y)``, fragmentation rate ``k_f(x)`` and removal rate ``mu(x)``.

    All three callables must accept numpy arrays.  ``sup_norms`` holds sampled
    upper bounds ``(|k_a|, |k_f|, |mu|)`` over the domain.
    """

    k_a: Callable
    k_f: Callable
    mu: Callable
    x_max: float
    sup_norms: tuple = field(default=None, compare=False)

    def __post_init__(self):
        if self.sup_norms is None:
            x = np.linspace(0.0, self.x_max, 513)
            ka = np.asarray(self.k_a(x[:, None], x[None, :]), dtype=float)
            norms = (float(np.max(np.abs(ka))),
                     float(np.max(np.abs(_evaluate(self.k_f, x)))),
                     float(np.max(np.abs(_evaluate(self.mu, x)))))
            if not all(np.isfinite(norms)):
                raise InvalidInputError("kernels must be bounded on the size domain")
            object.__setattr__(self, "sup_norms", norms)

    def matrices(self, grid: Grid):
        """Kernel values at the grid's right endpoints: ``(K, kf, mu)``."""
        x = grid.right
        K = np.broadcast_to(np.asarray(self.k_a(x[:, None], x[None, :]), dtype=float),
                            (grid.n_cells, grid.n_cells)).copy()
        return K, _evaluate(self.k_f, x), _evaluate(self.mu, x)

    def validate(self, n_samples: int = 2000, seed: int = 0, atol: float = 1e-14) -> None:
        """Check symmetry, truncation and sign of the kernels on random samples.

        Raises
        ------
        InvalidInputError
            On the first violated constraint.
        """
        rng = np.random.default_rng(seed)
        x = rng.uniform(0, self.x_max, n_samples)
        y = rng.uniform(0, self.x_max, n_samples)
        kxy = np.asarray(self.k_a(x, y), dtype=float)
        kyx = np.asarray(self.k_a(y, x), dtype=float)
        scale = atol * max(1.0, self.sup_norms[0])
        if np.any(np.abs(kxy - kyx) > scale):
            raise InvalidInputError("aggregation kernel is not symmetric")
        if np.any(np.abs(kxy[x + y > self.x_max]) > scale):
            raise InvalidInputError("aggregation kernel is nonzero for x + y > x_max")
        if np.any(kxy < 0) or np.any(_evaluate(self.k_f, x) < 0) or np.any(_evaluate(self.mu, x) < 0):
            raise InvalidInputError("kernels must be nonnegative")


def builtin_kernels(c_a: float, c_f: float, c_mu: float, x_max: float) -> KernelSet:
    """Orthokinetic aggregation with cube-root breakage and removal.

    ``k_a = c_a (x^(1/3) + y^(1/3))^3`` set to zero where ``x + y >= x_max``;
    ``k_f = c_f x^(1/3)``; ``mu = c_mu x^(1/3)``.
    """
    for name, c in (("c_a", c_a), ("c_f", c_f), ("c_mu", c_mu)):
        if not np.isfinite(c) or c < 0:
            raise InvalidInputError(f"{name} must be a nonnegative number, got {c!r}")
    if x_max <= 0:
        raise InvalidInputError("x_max must be positive")
    cutoff = x_max * (1.0 - TRUNCATION_RTOL)

    def k_a(x, y):
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        k = c_a * (np.cbrt(x) + np.cbrt(y)) ** 3
        return np.where(x + y >= cutoff, 0.0, k)

    def k_f(x):
        return c_f * np.cbrt(np.asarray(x, dtype=float))

    def mu(x):
        return c_mu * np.cbrt(np.asarray(x, dtype=float))

    # (x^(1/3) + y^(1/3))^3 on x + y <= x_max peaks at x = y = x_max / 2
    sup_ka = 4.0 * c_a * x_max
    return KernelSet(k_a, k_f, mu, float(x_max),
                     (float(sup_ka), float(c_f * np.cbrt(x_max)), float(c_mu * np.cbrt(x_max))))


def default_kernels(x_max: float = 1.0) -> KernelSet:
    """Kernel coefficients of the reference flocculation experiment."""
    return builtin_kernels(1e-6, 1e-1, 1e-1, x_max)
