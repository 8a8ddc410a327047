"""Conditional probability measures on atom grids and metrics between them.

A :class:`ConditionalMeasure` is a family of discrete daughter-size
distributions indexed by parent size.  The parent axis is cut into ``L``
half-open intervals ``(q_{l-1}, q_l]`` and every parent in interval ``l``
shares row ``l`` of an ``L x M`` weight array.  Daughter atoms sit at the
right endpoints of the daughter grid; an atom is admissible for row ``l`` only
if it does not exceed ``q_l``, which makes the array lower triangular when the
two grids coincide.

Row metrics work on :class:`FiniteMeasure` objects:

``prohorov``
    bisection on epsilon with a transportation feasibility check
    (Strassen's theorem) solved as a max-flow problem.
``levy``
    exact, from the completed graphs of the two step CDFs.
``kolmogorov`` / ``total_variation``
    exact on the merged support.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import networkx as nx
import numpy as np

from .domain import Grid
from .errors import InvalidInputError

ROW_SUM_TOL = 1e-12
REPRESENTATIONS = ("atomic-cdf", "density")
MODES = ("prohorov", "levy", "kolmogorov")


def _node_tol(x_max: float) -> float:
    return 1e-12 * x_max


# ---------------------------------------------------------------------------
# Finite (single-row) measures
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FiniteMeasure:
    """Probability measure with finitely many atoms on the real line."""

    locations: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        loc = np.array(self.locations, dtype=float).ravel()
        w = np.array(self.weights, dtype=float).ravel()
        if loc.shape != w.shape or loc.size == 0:
            raise InvalidInputError("locations and weights must be nonempty and of equal length")
        if not (np.all(np.isfinite(loc)) and np.all(np.isfinite(w))):
            raise InvalidInputError("non-finite atom")
        if np.any(w < 0):
            raise InvalidInputError("atom weights must be nonnegative")
        if abs(w.sum() - 1.0) > ROW_SUM_TOL * max(1, w.size):
            raise InvalidInputError(f"atom weights sum to {w.sum()!r}, not 1")
        order = np.argsort(loc, kind="stable")
        loc, w = loc[order], w[order]
        # merge coincident atoms
        uniq, inv = np.unique(loc, return_inverse=True)
        merged = np.bincount(inv, weights=w, minlength=uniq.size)
        uniq.setflags(write=False)
        merged.setflags(write=False)
        object.__setattr__(self, "locations", uniq)
        object.__setattr__(self, "weights", merged)

    @classmethod
    def dirac(cls, x: float) -> "FiniteMeasure":
        return cls([x], [1.0])

    def cdf(self, x):
        cum = np.cumsum(self.weights)
        idx = np.searchsorted(self.locations, np.asarray(x, dtype=float), side="right")
        return np.where(idx > 0, cum[np.maximum(idx - 1, 0)], 0.0)


def _merged_masses(mu: FiniteMeasure, nu: FiniteMeasure):
    support = np.union1d(mu.locations, nu.locations)
    a = np.zeros(support.size)
    b = np.zeros(support.size)
    a[np.searchsorted(support, mu.locations)] = mu.weights
    b[np.searchsorted(support, nu.locations)] = nu.weights
    return support, a, b


def total_variation(mu: FiniteMeasure, nu: FiniteMeasure) -> float:
    """``sup_A |mu(A) - nu(A)|``."""
    _, a, b = _merged_masses(mu, nu)
    return float(0.5 * np.abs(a - b).sum())


def kolmogorov_rows(mu: FiniteMeasure, nu: FiniteMeasure) -> float:
    """Sup distance between the two CDFs (attained at a support point)."""
    _, a, b = _merged_masses(mu, nu)
    return float(np.max(np.abs(np.cumsum(a) - np.cumsum(b))))


def _graph_position(m: FiniteMeasure, s: np.ndarray) -> np.ndarray:
    """x-coordinate where the line ``x + y = s`` meets the completed CDF graph."""
    cum = np.cumsum(m.weights)
    before = np.concatenate([[0.0], cum[:-1]])
    # each jump is a vertical segment from (a, before) to (a, cum)
    knots_s = np.empty(2 * m.locations.size)
    knots_s[0::2] = m.locations + before
    knots_s[1::2] = m.locations + cum
    knots_x = np.repeat(m.locations, 2)
    inside = np.interp(s, knots_s, knots_x)
    # flat pieces outside the support have slope one in s
    return np.where(s < knots_s[0], s, np.where(s > knots_s[-1], s - 1.0, inside))


def levy(mu: FiniteMeasure, nu: FiniteMeasure) -> float:
    """Exact Lévy distance between two finite measures.

    The band condition ``G(x - e) - e <= H(x) <= G(x + e) + e`` says that the
    completed graph of ``H`` stays within ``e`` of the graph of ``G`` along
    lines of slope -1.  Both graphs are piecewise linear in the parameter
    ``s = x + F(x)``, so the distance is the largest gap over the kinks.
    """
    cum_mu = np.cumsum(mu.weights)
    cum_nu = np.cumsum(nu.weights)
    s = np.concatenate([
        mu.locations + cum_mu, mu.locations + cum_mu - mu.weights,
        nu.locations + cum_nu, nu.locations + cum_nu - nu.weights,
    ])
    gap = np.abs(_graph_position(mu, s) - _graph_position(nu, s))
    return float(min(np.max(gap), 1.0))


def _max_flow_networkx(mu: FiniteMeasure, nu: FiniteMeasure, eps: float) -> float:
    g = nx.DiGraph()
    slack = _node_tol(1.0) + 1e-15
    for i, (x, w) in enumerate(zip(mu.locations, mu.weights)):
        g.add_edge("s", ("a", i), capacity=float(w))
    for j, (y, w) in enumerate(zip(nu.locations, nu.weights)):
        g.add_edge(("b", j), "t", capacity=float(w))
    for i, x in enumerate(mu.locations):
        for j, y in enumerate(nu.locations):
            if abs(x - y) <= eps + slack:
                g.add_edge(("a", i), ("b", j))
    if "s" not in g or "t" not in g:
        return 0.0
    return float(nx.maximum_flow_value(g, "s", "t"))


def _max_flow_line(mu: FiniteMeasure, nu: FiniteMeasure, eps: float) -> float:
    """Max flow when admissible targets of each source form a sliding window.

    On the line, the targets within ``eps`` of sorted sources are contiguous
    windows whose ends never move left, so filling the leftmost open target
    first is optimal.
    """
    slack = _node_tol(1.0) + 1e-15
    y = nu.locations
    cap = nu.weights.astype(float).copy()
    total = 0.0
    j0 = 0
    for x, w in zip(mu.locations, mu.weights):
        lo = np.searchsorted(y, x - eps - slack, side="left")
        hi = np.searchsorted(y, x + eps + slack, side="right")
        j = max(j0, lo)
        while w > 0 and j < hi:
            moved = min(w, cap[j])
            w -= moved
            cap[j] -= moved
            total += moved
            if cap[j] <= 0:
                j += 1
        j0 = max(j0, lo)
        while j0 < y.size and cap[j0] <= 0:
            j0 += 1
    return total


_FLOW_SOLVERS = {"line": _max_flow_line, "networkx": _max_flow_networkx}


def prohorov_feasible(mu: FiniteMeasure, nu: FiniteMeasure, eps: float,
                      method: str = "line") -> bool:
    """True if a coupling moves at most ``eps`` mass by more than ``eps``."""
    flow = _FLOW_SOLVERS[method](mu, nu, eps)
    return flow >= 1.0 - eps - 1e-12


def prohorov(mu: FiniteMeasure, nu: FiniteMeasure, tol: float = 1e-6,
             method: str = "line") -> float:
    """Prohorov distance between finite measures on the line.

    Returns the upper end of the final bisection bracket, so the result
    overestimates the true distance by less than ``tol``.

    Parameters
    ----------
    method:
        ``"line"`` uses the greedy max-flow valid for atoms on the real line,
        ``"networkx"`` a general max-flow solver on the admissibility graph.
    """
    if not tol > 0:
        raise InvalidInputError("tol must be positive")
    if method not in _FLOW_SOLVERS:
        raise InvalidInputError(f"unknown max-flow method {method!r}")
    if prohorov_feasible(mu, nu, 0.0, method):
        return 0.0
    lo, hi = 0.0, 1.0
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if prohorov_feasible(mu, nu, mid, method):
            hi = mid
        else:
            lo = mid
    return hi


ROW_METRICS: dict[str, Callable[[FiniteMeasure, FiniteMeasure], float]] = {
    "prohorov": prohorov,
    "levy": levy,
    "kolmogorov": kolmogorov_rows,
}


# ---------------------------------------------------------------------------
# Conditional measures
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ConditionalMeasure:
    """Element of the atomic approximation space for ``F(x, y)``.

    ``weights[l, m]`` is the mass that a parent in ``(q_{l-1}, q_l]`` puts on
    the daughter atom ``daughter_grid.right[m]``.  Weights are always stored
    as point masses; ``representation`` only records how the measure was
    specified (and how it is written to disk).
    """

    daughter_grid: Grid
    parent_grid: Grid
    weights: np.ndarray
    representation: str = "atomic-cdf"

    def __post_init__(self):
        if self.daughter_grid.x_max != self.parent_grid.x_max:
            raise InvalidInputError("daughter and parent grids must share x_max")
        if self.representation not in REPRESENTATIONS:
            raise InvalidInputError(f"unknown representation {self.representation!r}")
        w = np.array(self.weights, dtype=float)
        shape = (self.parent_grid.n_cells, self.daughter_grid.n_cells)
        if w.shape != shape:
            raise InvalidInputError(f"weights have shape {w.shape}, expected {shape}")
        row = first_violation(w, admissible_mask(self.daughter_grid, self.parent_grid))
        if row is not None:
            raise InvalidInputError(f"row {row[0] + 1}: {row[1]}")
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)

    @property
    def x_max(self) -> float:
        return self.parent_grid.x_max

    @property
    def atoms(self) -> np.ndarray:
        return self.daughter_grid.right

    @property
    def mask(self) -> np.ndarray:
        return admissible_mask(self.daughter_grid, self.parent_grid)

    def row_index(self, y) -> np.ndarray:
        """0-based parent row for parent size ``y``; ``y = 0`` maps to row 0."""
        y = np.asarray(y, dtype=float)
        g = self.parent_grid
        idx = np.ceil(y / g.dx - 1e-9).astype(int) - 1
        return np.clip(idx, 0, g.n_cells - 1)

    def row(self, ell: int) -> FiniteMeasure:
        """Daughter distribution of 0-based parent row ``ell``."""
        keep = self.weights[ell] > 0
        return FiniteMeasure(self.atoms[keep], self.weights[ell, keep] / self.weights[ell, keep].sum())

    def density(self) -> np.ndarray:
        """Weights divided by the daughter cell width (the ``Gamma`` form)."""
        return self.weights / self.daughter_grid.dx

    def sup_density(self) -> float:
        return float(self.density().max())

    def with_weights(self, weights: np.ndarray) -> "ConditionalMeasure":
        return ConditionalMeasure(self.daughter_grid, self.parent_grid, weights, self.representation)


def admissible_mask(daughter_grid: Grid, parent_grid: Grid) -> np.ndarray:
    """Boolean ``L x M`` array: daughter atom ``m`` does not exceed ``q_l``."""
    tol = _node_tol(parent_grid.x_max)
    return daughter_grid.right[None, :] <= parent_grid.right[:, None] + tol


def first_violation(weights: np.ndarray, mask: np.ndarray):
    """Return ``(row, reason)`` for the first invalid row, or None."""
    for ell in range(weights.shape[0]):
        w = weights[ell]
        if not np.all(np.isfinite(w)):
            return ell, "non-finite weight"
        if np.any(w < 0):
            return ell, "negative weight"
        if np.any(w[~mask[ell]] != 0):
            return ell, "mass on a daughter atom larger than the parent"
        if abs(w.sum() - 1.0) > ROW_SUM_TOL * max(1, int(mask[ell].sum())):
            return ell, f"row sums to {w.sum()!r}, not 1"
    return None


def _normalize_rows(values: np.ndarray, mask: np.ndarray) -> np.ndarray:
    w = np.where(mask, values, 0.0)
    sums = w.sum(axis=1)
    bad = np.flatnonzero(~(sums > 0))
    if bad.size:
        raise InvalidInputError(f"row {bad[0] + 1} carries no mass")
    w = w / sums[:, None]
    # put the rounding residue on the largest entry so rows sum to 1
    resid = 1.0 - w.sum(axis=1)
    top = np.argmax(w, axis=1)
    w[np.arange(w.shape[0]), top] += resid
    return w


def from_density(gamma_values, daughter_grid: Grid, parent_grid: Grid) -> ConditionalMeasure:
    """Build a measure from density samples ``gamma[l, m]`` at the atoms.

    Weights are ``gamma * dx`` renormalized so each row sums to one; entries
    above the diagonal are ignored.
    """
    g = np.array(gamma_values, dtype=float)
    shape = (parent_grid.n_cells, daughter_grid.n_cells)
    if g.shape != shape:
        raise InvalidInputError(f"density array has shape {g.shape}, expected {shape}")
    mask = admissible_mask(daughter_grid, parent_grid)
    if np.any(g[mask] < 0) or not np.all(np.isfinite(g[mask])):
        raise InvalidInputError("densities must be finite and nonnegative")
    w = _normalize_rows(g * daughter_grid.dx, mask)
    return ConditionalMeasure(daughter_grid, parent_grid, w, "density")


def from_cdf(cdf: Callable, daughter_grid: Grid, parent_grid: Grid) -> ConditionalMeasure:
    """Discretize a continuous conditional CDF ``F(x, y)`` by cell increments.

    Row ``l`` uses the parent size ``y = q_l`` and assigns to atom ``m`` the
    mass ``F(q_m, y) - F(q_{m-1}, y)``.  This handles densities that are
    unbounded at ``x = 0`` or ``x = y``.
    """
    x = daughter_grid.nodes
    y = parent_grid.right
    F = np.asarray(cdf(x[None, :], y[:, None]), dtype=float)
    F = np.broadcast_to(F, (y.size, x.size))
    inc = np.diff(F, axis=1)
    mask = admissible_mask(daughter_grid, parent_grid)
    return ConditionalMeasure(daughter_grid, parent_grid, _normalize_rows(np.clip(inc, 0, None), mask))


def uniform(daughter_grid: Grid, parent_grid: Grid) -> ConditionalMeasure:
    """Each row uniform over its admissible atoms (row 1 is a point mass)."""
    mask = admissible_mask(daughter_grid, parent_grid)
    return from_density(mask.astype(float), daughter_grid, parent_grid)


def cdf(F: ConditionalMeasure, x, y):
    """Evaluate ``F(x, y)``; identically 1 for ``x >= y``."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    tol = _node_tol(F.x_max)
    if np.any(x < -tol) or np.any(x > F.x_max + tol) or np.any(y < -tol) or np.any(y > F.x_max + tol):
        raise InvalidInputError("(x, y) outside the size domain")
    x, y = np.broadcast_arrays(x, y)
    rows = F.row_index(y)
    cum = np.cumsum(F.weights, axis=1)
    idx = np.searchsorted(F.atoms, x + tol, side="right")
    vals = np.where(idx > 0, cum[rows, np.maximum(idx - 1, 0)], 0.0)
    out = np.where(x >= y, 1.0, vals)
    return out if out.ndim else float(out)


def _row_pairs(F: ConditionalMeasure, G: ConditionalMeasure):
    """Row indices of F and G on each interval of the merged parent partition."""
    if abs(F.x_max - G.x_max) > _node_tol(F.x_max):
        raise InvalidInputError("measures live on different size domains")
    tol = _node_tol(F.x_max)
    ends = np.union1d(F.parent_grid.right, G.parent_grid.right)
    keep = np.concatenate([[True], np.diff(ends) > tol])
    ends = ends[keep]
    starts = np.concatenate([[0.0], ends[:-1]])
    probe = 0.5 * (starts + ends)
    return F.row_index(probe), G.row_index(probe), ends


def kolmogorov(F: ConditionalMeasure, G: ConditionalMeasure) -> float:
    """``sup_{x, y} |F(x, y) - G(x, y)|`` over the common refinement.

    On each merged parent interval both measures are fixed step functions in
    ``x``; the sup is reached at a merged atom below the interval's right end.
    """
    rf, rg, _ = _row_pairs(F, G)
    tol = _node_tol(F.x_max)
    atoms = np.union1d(F.atoms, G.atoms)
    cf = np.cumsum(F.weights, axis=1)
    cg = np.cumsum(G.weights, axis=1)
    jf = np.searchsorted(F.atoms, atoms + tol, side="right")
    jg = np.searchsorted(G.atoms, atoms + tol, side="right")
    vf = np.where(jf > 0, cf[:, np.maximum(jf - 1, 0)], 0.0)[rf]
    vg = np.where(jg > 0, cg[:, np.maximum(jg - 1, 0)], 0.0)[rg]
    return float(np.max(np.abs(vf - vg)))


def conditional_distance(F: ConditionalMeasure, G: ConditionalMeasure,
                         mode: str = "prohorov", tol: float = 1e-6) -> float:
    """Supremum over parent rows of a row metric."""
    if mode not in MODES:
        raise InvalidInputError(f"mode must be one of {MODES}, got {mode!r}")
    if mode == "kolmogorov":
        return kolmogorov(F, G)
    rf, rg, _ = _row_pairs(F, G)
    metric = ROW_METRICS[mode]
    cache: dict = {}
    best = 0.0
    for a, b in zip(rf, rg):
        key = (int(a), int(b))
        if key not in cache:
            mu, nu = F.row(a), G.row(b)
            cache[key] = prohorov(mu, nu, tol) if mode == "prohorov" else metric(mu, nu)
        best = max(best, cache[key])
    return best


def set_distance(A: Sequence[ConditionalMeasure], B: Sequence[ConditionalMeasure],
                 mode: str = "inf", metric: str = "prohorov", tol: float = 1e-6) -> float:
    """Distance between two finite sets of measures.

    ``mode="inf"`` is the smallest pairwise distance; ``"hausdorff"`` is
    the larger of the two directed sup-inf distances.
    """
    A, B = list(A), list(B)
    if not A or not B:
        raise InvalidInputError("set_distance needs two nonempty sets")
    D = np.array([[conditional_distance(f, g, metric, tol) for g in B] for f in A])
    if mode == "inf":
        return float(D.min())
    if mode == "hausdorff":
        return float(max(D.min(axis=1).max(), D.min(axis=0).max()))
    raise InvalidInputError(f"unknown set distance mode {mode!r}")


# ---------------------------------------------------------------------------
# File format
# ---------------------------------------------------------------------------


def to_json_dict(F: ConditionalMeasure) -> dict:
    values = F.density() if F.representation == "density" else F.weights
    rows = [[float(v) for v in values[ell, F.mask[ell]]] for ell in range(F.parent_grid.n_cells)]
    return {
        "x_max": F.x_max,
        "M": F.daughter_grid.n_cells,
        "L": F.parent_grid.n_cells,
        "representation": F.representation,
        "weights": rows,
    }


def from_json_dict(d: dict) -> ConditionalMeasure:
    try:
        x_max, M, L, rep, rows = d["x_max"], d["M"], d["L"], d["representation"], d["weights"]
    except (KeyError, TypeError) as exc:
        raise InvalidInputError(f"measure file is missing field {exc}") from None
    daughter, parent = Grid(M, x_max), Grid(L, x_max)
    if rep not in REPRESENTATIONS:
        raise InvalidInputError(f"unknown representation {rep!r}")
    mask = admissible_mask(daughter, parent)
    if not isinstance(rows, list) or not all(isinstance(r, list) for r in rows):
        raise InvalidInputError("weights must be a list of rows")
    if len(rows) != L:
        raise InvalidInputError(f"expected {L} weight rows, found {len(rows)}")
    w = np.zeros((L, M))
    for ell, row in enumerate(rows):
        if len(row) != int(mask[ell].sum()):
            raise InvalidInputError(
                f"row {ell + 1}: expected {int(mask[ell].sum())} entries, found {len(row)}")
        try:
            w[ell, mask[ell]] = row
        except (TypeError, ValueError):
            raise InvalidInputError(f"row {ell + 1}: non-numeric entry") from None
    if rep == "density":
        w = w * daughter.dx
    bad = first_violation(w, mask)
    if bad is not None:
        raise InvalidInputError(f"row {bad[0] + 1}: {bad[1]}")
    return ConditionalMeasure(daughter, parent, w, rep)


def save_measure(F: ConditionalMeasure, path) -> None:
    Path(path).write_text(json.dumps(to_json_dict(F), indent=1) + "\n")


def load_measure(path) -> ConditionalMeasure:
    try:
        d = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise InvalidInputError(f"{path}: not valid JSON ({exc})") from None
    return from_json_dict(d)


def lattice_error(F: ConditionalMeasure, reference: ConditionalMeasure) -> float:
    """Max ``|F - reference|`` over the lattice points of ``F``.

    The points are ``(x_i, y_j)`` with ``x_i`` an atom of ``F`` and ``y_j`` a
    right end of one of its parent cells, ``x_i < y_j``.  Every such point
    must also be a lattice point of ``reference``, so coarse estimates are
    compared where both measures are sampled rather than extended.
    """
    tol = _node_tol(F.x_max)
    for mine, theirs, what in ((F.atoms, reference.atoms, "atoms"),
                               (F.parent_grid.right, reference.parent_grid.right, "parent nodes")):
        gap = np.min(np.abs(mine[:, None] - theirs[None, :]), axis=1)
        if np.any(gap > tol):
            raise InvalidInputError(f"{what} are not a subset of the reference lattice")
    X, Y = np.meshgrid(F.atoms, F.parent_grid.right)
    below = X < Y - tol
    if not np.any(below):
        return 0.0
    x, y = X[below], Y[below]
    return float(np.max(np.abs(cdf(F, x, y) - cdf(reference, x, y))))
