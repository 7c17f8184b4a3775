"""Backward induction over a discretised belief grid.

The belief (mu''_D, mu''_K) lives on a rectangular grid of cells whose
midpoints act as representatives. From a cell midpoint and an action, the
next posterior mean mu''_D is Gaussian and mu''_K is a deterministic linear
function of it, so a transition row is a set of Gaussian CDF differences over
the mu_D cells, each attached to one mu_K cell.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import ndtr

from .belief import BeliefMean, CovarianceSchedule, precompute_schedule, prior_mean_arrays
from .config import dataclass_from_mapping
from .env import N_ACTIONS, ModelParams

D_FLOOR = -159.36
D_CEILING = 26.67


@dataclass(frozen=True)
class VIConfig:
    n_d: int = 60
    n_k: int = 20
    k_interp: bool = False

    def __post_init__(self):
        if self.n_d < 1 or self.n_k < 1:
            raise ValueError("grid needs at least one cell per axis")

    @classmethod
    def from_mapping(cls, mapping, prefix: str = "vi_") -> "VIConfig":
        return dataclass_from_mapping(cls, mapping, prefix=prefix)


@dataclass(frozen=True)
class BeliefGrid:
    n_d: int = 60
    n_k: int = 20
    bounds_d: tuple[float, float] = (D_FLOOR, D_CEILING)
    bounds_k: tuple[float, float] = (-0.6, 9.4)

    def __post_init__(self):
        if self.n_d < 1 or self.n_k < 1:
            raise ValueError("grid needs at least one cell per axis")
        if not self.bounds_d[1] > self.bounds_d[0] or not self.bounds_k[1] > self.bounds_k[0]:
            raise ValueError("degenerate grid: zero-width cells")

    @classmethod
    def for_params(cls, params: ModelParams, n_d: int = 60, n_k: int = 20) -> "BeliefGrid":
        low_k = params.mu_k0 - params.t_end * params.delta_k - 3 * params.sigma_k0
        high_k = params.mu_k0 + 3 * params.sigma_k0
        return cls(n_d, n_k, (D_FLOOR, D_CEILING), (low_k, high_k))

    @property
    def n_cells(self) -> int:
        return self.n_d * self.n_k

    @property
    def edges_d(self) -> np.ndarray:
        return np.linspace(self.bounds_d[0], self.bounds_d[1], self.n_d + 1)

    @property
    def edges_k(self) -> np.ndarray:
        return np.linspace(self.bounds_k[0], self.bounds_k[1], self.n_k + 1)

    @property
    def mid_d(self) -> np.ndarray:
        e = self.edges_d
        return 0.5 * (e[:-1] + e[1:])

    @property
    def mid_k(self) -> np.ndarray:
        e = self.edges_k
        return 0.5 * (e[:-1] + e[1:])

    def cell_midpoints(self) -> tuple[np.ndarray, np.ndarray]:
        """Midpoints of all cells in flat order (index = i_d * n_k + i_k)."""
        md, mk = np.meshgrid(self.mid_d, self.mid_k, indexing="ij")
        return md.ravel(), mk.ravel()

    def index_d(self, mu_d) -> np.ndarray:
        w = (self.bounds_d[1] - self.bounds_d[0]) / self.n_d
        i = np.floor((np.asarray(mu_d, dtype=float) - self.bounds_d[0]) / w)
        return np.clip(i, 0, self.n_d - 1).astype(np.int64)

    def index_k(self, mu_k) -> np.ndarray:
        w = (self.bounds_k[1] - self.bounds_k[0]) / self.n_k
        i = np.floor((np.asarray(mu_k, dtype=float) - self.bounds_k[0]) / w)
        return np.clip(i, 0, self.n_k - 1).astype(np.int64)

    def cell_index(self, mu_d, mu_k) -> np.ndarray:
        """Flat index of the containing cell; outside values go to boundary cells."""
        return self.index_d(mu_d) * self.n_k + self.index_k(mu_k)

    def split(self, cell) -> tuple[np.ndarray, np.ndarray]:
        cell = np.asarray(cell)
        return cell // self.n_k, cell % self.n_k


@dataclass
class TransitionTable:
    """Sparse row-stochastic transitions between cells.

    ``probs[t, a]`` and ``dest[t, a]`` have shape (n_cells, m): entry j of
    row ``c`` moves mass ``probs[t, a, c, j]`` from cell c (at t-1) to cell
    ``dest[t, a, c, j]`` (at t). Index t runs over 1..t_end; slot 0 is unused.
    """

    grid: BeliefGrid
    probs: np.ndarray
    dest: np.ndarray
    initial_probs: np.ndarray
    initial_dest: np.ndarray

    def matrix(self, t: int, action: int) -> np.ndarray:
        n = self.grid.n_cells
        m = np.zeros((n, n))
        rows = np.repeat(np.arange(n), self.probs.shape[-1])
        np.add.at(m, (rows, self.dest[t, action].ravel()), self.probs[t, action].ravel())
        return m

    def initial_distribution(self) -> np.ndarray:
        v = np.zeros(self.grid.n_cells)
        np.add.at(v, self.initial_dest, self.initial_probs)
        return v

    def expectation(self, t: int, action: int, values: np.ndarray) -> np.ndarray:
        """sum_{c'} P(c' | c, a) * values[c'] for every source cell c."""
        return np.einsum("cj,cj->c", self.probs[t, action], values[self.dest[t, action]])


def _rows(src_d, src_k, action, t, grid: BeliefGrid, schedule: CovarianceSchedule, params: ModelParams, k_interp: bool):
    pd, pk = prior_mean_arrays(src_d, src_k, action, params)
    pd = np.atleast_1d(pd)
    pk = np.atleast_1d(pk)
    std = schedule.transition_std(t)
    edges = grid.edges_d.copy()
    edges[0], edges[-1] = -np.inf, np.inf  # boundary cells absorb the tails
    if std > 0:
        cdf = ndtr((edges[None, :] - pd[:, None]) / std)
        p = np.diff(cdf, axis=1)
    else:
        p = np.zeros((len(pd), grid.n_d))
        p[np.arange(len(pd)), grid.index_d(pd)] = 1.0
    k_dest = pk[:, None] + schedule.k_slope(t) * (_conditional_mean_d(edges, pd, std, grid) - pd[:, None])
    base = np.arange(grid.n_d)[None, :] * grid.n_k
    if not k_interp or grid.n_k == 1:
        return p, base + grid.index_k(k_dest)
    mk = grid.mid_k
    w = mk[1] - mk[0]
    u = (k_dest - mk[0]) / w
    lo = np.clip(np.floor(u), 0, grid.n_k - 2).astype(np.int64)
    frac = np.clip(u - lo, 0.0, 1.0)
    probs = np.stack([p * (1 - frac), p * frac], axis=-1).reshape(len(pd), -1)
    dest = np.stack([base + lo, base + lo + 1], axis=-1).reshape(len(pd), -1)
    return probs, dest


def _conditional_mean_d(edges, pd, std, grid: BeliefGrid) -> np.ndarray:
    """E[mu''_D | mu''_D in cell j] for every source row and destination cell j.

    Boundary cells include the absorbed tails. Cells carrying no mass (down
    to underflow) fall back to their midpoint.
    """
    if std == 0:
        return np.broadcast_to(pd[:, None], (len(pd), grid.n_d)).copy()
    z = (edges[None, :] - pd[:, None]) / std
    lo, hi = z[:, :-1], z[:, 1:]
    pdf_lo = np.where(np.isfinite(lo), np.exp(-0.5 * np.where(np.isfinite(lo), lo, 0.0) ** 2), 0.0)
    pdf_hi = np.where(np.isfinite(hi), np.exp(-0.5 * np.where(np.isfinite(hi), hi, 0.0) ** 2), 0.0)
    num = (pdf_lo - pdf_hi) / np.sqrt(2 * np.pi)
    # upper-tail form keeps precision when the whole cell lies above the mean
    upper = lo > 0
    den = np.where(upper, ndtr(-lo) - ndtr(-hi), ndtr(hi) - ndtr(lo))
    with np.errstate(divide="ignore", invalid="ignore"):
        zc = np.where(den > 1e-300, num / den, np.nan)
    mid = (grid.mid_d[None, :] - pd[:, None]) / std
    zc = np.where(np.isfinite(zc), np.clip(zc, lo, hi), mid)
    return pd[:, None] + std * zc


def build_transition_tables(grid: BeliefGrid, schedule: CovarianceSchedule, params: ModelParams, k_interp: bool = False) -> TransitionTable:
    T = params.t_end
    src_d, src_k = grid.cell_midpoints()
    m = grid.n_d * (2 if k_interp and grid.n_k > 1 else 1)
    probs = np.zeros((T + 1, N_ACTIONS, grid.n_cells, m))
    dest = np.zeros((T + 1, N_ACTIONS, grid.n_cells, m), dtype=np.int32)
    for t in range(1, T + 1):
        for a in range(N_ACTIONS):
            probs[t, a], dest[t, a] = _rows(src_d, src_k, a, t, grid, schedule, params, k_interp)
    ip, idest = _rows(np.array([params.mu_d0]), np.array([params.mu_k0]), 0, 1, grid, schedule, params, k_interp)
    return TransitionTable(grid, probs, dest, ip[0], idest[0])


def failure_probability(mu_d, sigma_d: float, d_cr: float):
    mu_d = np.asarray(mu_d, dtype=float)
    if sigma_d == 0:
        return (mu_d > d_cr).astype(float)
    return ndtr((mu_d - d_cr) / sigma_d)


def expected_immediate_cost(cell, action: int, schedule: CovarianceSchedule, t: int, params: ModelParams, grid: BeliefGrid | None = None):
    """Action cost plus expected failure cost at ``t`` for a cell (or raw mu_D values).

    ``cell`` is a flat cell index when ``grid`` is given, otherwise it is
    taken as the posterior mean mu''_D itself.
    """
    mu_d = grid.cell_midpoints()[0][np.asarray(cell)] if grid is not None else cell
    return params.cost_a[action] + params.cost_f * failure_probability(mu_d, schedule.sigma_d_post[t], params.d_cr)


@dataclass
class ValuePolicyTables:
    """``values[t]``, ``q[t]`` and ``policy[t]`` for t = 1..t_end (row 0 unused).

    At t_end only the expected failure cost remains and the stored action is
    do-nothing.
    """

    values: np.ndarray
    q: np.ndarray
    policy: np.ndarray


def backward_induction(grid: BeliefGrid, tables: TransitionTable, params: ModelParams, schedule: CovarianceSchedule) -> ValuePolicyTables:
    T = params.t_end
    mid_d, _ = grid.cell_midpoints()
    values = np.full((T + 1, grid.n_cells), np.nan)
    q = np.full((T + 1, grid.n_cells, N_ACTIONS), np.nan)
    policy = np.zeros((T + 1, grid.n_cells), dtype=np.int8)
    values[T] = params.cost_f * failure_probability(mid_d, schedule.sigma_d_post[T], params.d_cr)
    for t in range(T - 1, 0, -1):
        fail = params.cost_f * failure_probability(mid_d, schedule.sigma_d_post[t], params.d_cr)
        for a in range(N_ACTIONS):
            q[t, :, a] = params.cost_a[a] + fail + params.gamma * tables.expectation(t + 1, a, values[t + 1])
        # argmin returns the first minimiser: ties go to the lower action index
        policy[t] = np.argmin(q[t], axis=1)
        values[t] = np.min(q[t], axis=1)
    return ValuePolicyTables(values, q, policy)


class VIPolicy:
    """Looks up the action of the cell containing the tracked belief."""

    name = "vi"

    def __init__(self, tables: ValuePolicyTables, grid: BeliefGrid):
        self.tables = tables
        self.grid = grid
        self.t_end = tables.values.shape[0] - 1

    def action_at(self, t: int, mu_d, mu_k):
        if not 1 <= t <= self.t_end:
            raise ValueError(f"no decision table for t={t}")
        return self.tables.policy[t][self.grid.cell_index(mu_d, mu_k)]

    def reset(self, n, rng):
        pass

    def act(self, t, obs, prev_action, belief: BeliefMean):
        if not 1 <= t <= self.t_end - 1:
            raise ValueError(f"decision epochs are 1..{self.t_end - 1}, got {t}")
        return self.action_at(t, belief.mu_d, belief.mu_k).astype(np.int64)


@dataclass
class VISolution:
    params: ModelParams
    grid: BeliefGrid
    schedule: CovarianceSchedule
    transitions: TransitionTable
    tables: ValuePolicyTables
    k_interp: bool = False
    _policy: VIPolicy | None = field(default=None, repr=False)

    @property
    def policy(self) -> VIPolicy:
        if self._policy is None:
            self._policy = VIPolicy(self.tables, self.grid)
        return self._policy

    def predicted_lcc(self) -> float:
        """Expected LCC implied by the value table from the initial belief."""
        p = self.params
        fail0 = p.cost_f * failure_probability(p.mu_d0, p.sigma_d0, p.d_cr)
        cont = self.transitions.initial_probs @ self.tables.values[1][self.transitions.initial_dest]
        return float(fail0 + p.gamma * cont)

    def snapshot(self, t: int) -> np.ndarray:
        return self.tables.policy[t].reshape(self.grid.n_d, self.grid.n_k)

    def write_value_csv(self, path: str | Path) -> None:
        md, mk = self.grid.cell_midpoints()
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "cell_d", "cell_k", "mu_d", "mu_k", "value", "action"])
            for t in range(1, self.params.t_end + 1):
                for c in range(self.grid.n_cells):
                    i, j = divmod(c, self.grid.n_k)
                    w.writerow([t, i, j, repr(float(md[c])), repr(float(mk[c])), repr(float(self.tables.values[t, c])), int(self.tables.policy[t, c])])

    def write_snapshot_csv(self, path: str | Path, t: int) -> None:
        write_snapshot_csv(path, t, self.grid, self.tables.policy[t])


def write_snapshot_csv(path, t: int, grid: BeliefGrid, actions) -> None:
    md, mk = grid.cell_midpoints()
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "cell_d", "cell_k", "mu_d", "mu_k", "action"])
        for c in range(grid.n_cells):
            i, j = divmod(c, grid.n_k)
            w.writerow([t, i, j, repr(float(md[c])), repr(float(mk[c])), int(actions[c])])


def solve(params: ModelParams, grid: BeliefGrid | None = None, k_interp: bool = False) -> VISolution:
    grid = grid or BeliefGrid.for_params(params)
    schedule = precompute_schedule(params)
    transitions = build_transition_tables(grid, schedule, params, k_interp=k_interp)
    tables = backward_induction(grid, transitions, params, schedule)
    return VISolution(params, grid, schedule, transitions, tables, k_interp)
