"""Monte Carlo evaluation, sigma_E sweeps and the exports used for plotting.

Evaluation splits ``n`` trajectories into fixed-size chunks. Chunk ``j``
is simulated from the ``j``-th child of ``SeedSequence(seed)``, so a report
depends only on (policy, params, n, seed, chunk_size) and two runs that
differ only in ``sigma_e`` share all state and noise variates.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .belief import BeliefMean, precompute_schedule
from .config import ConfigError, dataclass_from_mapping
from .env import N_ACTIONS, ConstantPolicy, ModelParams, RandomPolicy, simulate_batch
from .rqn.policy import RQNPolicy
from .vi import BeliefGrid, VIPolicy, write_snapshot_csv

METHODS = ("vi", "mcts", "rqn", "benchmark-a1", "random")
DEFAULT_SWEEP = (0.5, 1.0, 2.0, 5.0, 10.0, 20.0, 50.0, 100.0, 200.0, 500.0, 1000.0, 2000.0, 5000.0)
DEFAULT_CHUNK = 10_000


@dataclass(frozen=True)
class ExperimentConfig:
    methods: tuple[str, ...] = ("vi", "benchmark-a1")
    sigma_e: tuple[float, ...] = DEFAULT_SWEEP
    n_eval_vi: int = 2_000_000
    n_eval_mcts: int = 2_000
    n_eval_rqn: int = 1_000_000
    n_eval_baseline: int = 100_000
    seed: int = 0
    chunk_size: int = DEFAULT_CHUNK

    def __post_init__(self):
        object.__setattr__(self, "methods", tuple(m.strip() for m in self.methods))
        object.__setattr__(self, "sigma_e", tuple(float(s) for s in self.sigma_e))
        bad = [m for m in self.methods if m not in METHODS]
        if bad:
            raise ValueError(f"unknown method(s) {bad}; choose from {METHODS}")
        if not self.methods or not self.sigma_e:
            raise ValueError("need at least one method and one sigma_e")
        if any(s < 0 for s in self.sigma_e):
            raise ValueError("sigma_e values must be nonnegative")
        if min(self.n_eval_vi, self.n_eval_mcts, self.n_eval_rqn, self.n_eval_baseline) < 1:
            raise ValueError("n_eval must be at least 1")
        if self.chunk_size < 1:
            raise ValueError("chunk_size must be positive")

    def n_eval(self, method: str) -> int:
        if method in ("vi", "mcts", "rqn"):
            return getattr(self, f"n_eval_{method}")
        return self.n_eval_baseline

    def covers_saturation(self) -> bool:
        """True if the sweep reaches both the informative and the uninformative plateau."""
        return min(self.sigma_e) <= 0.5 and max(self.sigma_e) >= 1000.0

    @classmethod
    def from_mapping(cls, mapping, prefix: str = "sweep_") -> "ExperimentConfig":
        return dataclass_from_mapping(cls, mapping, prefix=prefix)


@dataclass
class EvalReport:
    method: str
    sigma_e: float
    n: int
    mean_lcc: float
    std_lcc: float
    standard_error: float
    action_frequencies: np.ndarray  # (t_end - 1, 4), row i is decision epoch t = i + 1
    lcc: np.ndarray | None = field(default=None, repr=False)
    actions: np.ndarray | None = field(default=None, repr=False)

    def summary(self) -> dict:
        return {
            "method": self.method, "sigma_e": self.sigma_e, "n": self.n,
            "mean_lcc": self.mean_lcc, "std_lcc": self.std_lcc, "standard_error": self.standard_error,
        }


def _chunks(n: int, chunk_size: int):
    sizes = [chunk_size] * (n // chunk_size)
    if n % chunk_size:
        sizes.append(n % chunk_size)
    return sizes


def lcc_statistics(lcc: np.ndarray) -> tuple[float, float, float]:
    """Mean, sample standard deviation and standard error (std / sqrt(n))."""
    n = len(lcc)
    mean = float(np.mean(lcc))
    std = float(np.std(lcc, ddof=1)) if n > 1 else 0.0
    return mean, std, std / math.sqrt(n)


def action_counts(actions: np.ndarray) -> np.ndarray:
    """(t_end - 1, 4) counts of the actions chosen at decision epochs 1..t_end-1."""
    dec = np.asarray(actions)[:, 1:]
    out = np.zeros((dec.shape[1], N_ACTIONS), dtype=np.int64)
    for a in range(N_ACTIONS):
        out[:, a] = np.sum(dec == a, axis=0)
    return out


def evaluate(
    policy,
    params: ModelParams,
    n: int,
    seed: int,
    method: str | None = None,
    chunk_size: int = DEFAULT_CHUNK,
    keep_records: bool = False,
) -> EvalReport:
    """Mean/std/SE of the discounted LCC over ``n`` simulated life cycles."""
    if n < 1:
        raise ValueError("n must be at least 1")
    schedule = precompute_schedule(params)
    sizes = _chunks(n, chunk_size)
    children = np.random.SeedSequence(seed).spawn(len(sizes))
    lcc = np.empty(n)
    counts = np.zeros((params.t_end - 1, N_ACTIONS), dtype=np.int64)
    actions = np.empty((n, params.t_end), dtype=np.int8) if keep_records else None
    start = 0
    for size, ss in zip(sizes, children):
        batch = simulate_batch(policy, params, size, np.random.default_rng(ss), schedule=schedule)
        lcc[start:start + size] = batch.discounted_lcc
        counts += action_counts(batch.actions)
        if actions is not None:
            actions[start:start + size] = batch.actions
        start += size
    mean, std, se = lcc_statistics(lcc)
    name = method or getattr(policy, "name", type(policy).__name__)
    return EvalReport(name, float(params.sigma_e), n, mean, std, se, counts / n, lcc if keep_records else None, actions)


def benchmark_a1_policy() -> ConstantPolicy:
    """Minor repair every year, whatever is observed."""
    return ConstantPolicy(1)


def random_policy() -> RandomPolicy:
    return RandomPolicy()


def action_statistics(report: EvalReport) -> np.ndarray:
    return report.action_frequencies


def write_action_statistics_csv(path, report: EvalReport) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["t"] + [f"a{a}" for a in range(N_ACTIONS)])
        for i, row in enumerate(report.action_frequencies):
            w.writerow([i + 1] + [repr(float(v)) for v in row])


def read_action_statistics_csv(path) -> np.ndarray:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    return np.array([[float(r[f"a{a}"]) for a in range(N_ACTIONS)] for r in rows])


def write_lcc_csv(path, lcc: np.ndarray) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["trajectory", "lcc"])
        for i, v in enumerate(lcc):
            w.writerow([i, repr(float(v))])


def read_lcc_csv(path) -> np.ndarray:
    with open(path, newline="", encoding="utf-8") as fh:
        return np.array([float(r["lcc"]) for r in csv.DictReader(fh)])


# sweep

SWEEP_HEADER = ["method", "sigma_e", "mean", "std", "se", "n"]


@dataclass(frozen=True)
class SweepRow:
    method: str
    sigma_e: float
    mean: float
    std: float
    se: float
    n: int


PolicyFactory = Callable[[str, ModelParams], object]


def sweep(config: ExperimentConfig, params: ModelParams, factory: PolicyFactory) -> list[SweepRow]:
    """Evaluate every method at every sigma_E.

    ``factory(method, params_at_sigma)`` must return a ready policy (VI solved,
    RQN trained or loaded); it raises ``LookupError`` for a missing artifact.
    Each (method, sigma_E) pair uses ``config.seed``, so methods and noise
    levels share random variates.
    """
    rows = []
    for s in config.sigma_e:
        p = params.replace(sigma_e=s)
        for m in config.methods:
            policy = factory(m, p)
            r = evaluate(policy, p, config.n_eval(m), config.seed, method=m, chunk_size=config.chunk_size)
            rows.append(SweepRow(m, s, r.mean_lcc, r.std_lcc, r.standard_error, r.n))
    return rows


def write_sweep_csv(path, rows: list[SweepRow]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(SWEEP_HEADER)
        for r in rows:
            w.writerow([r.method, repr(r.sigma_e), repr(r.mean), repr(r.std), repr(r.se), r.n])


def read_sweep_csv(path) -> list[SweepRow]:
    with open(path, newline="", encoding="utf-8") as fh:
        return [SweepRow(r["method"], float(r["sigma_e"]), float(r["mean"]), float(r["std"]), float(r["se"]), int(r["n"]))
                for r in csv.DictReader(fh)]


# belief-grid snapshots

class ImposedBeliefError(TypeError):
    """The policy acts on raw observation histories, so beliefs cannot be imposed on it."""


def policy_grid_snapshot(policy, t: int, grid: BeliefGrid, rng: np.random.Generator | None = None) -> np.ndarray:
    """Action chosen at every cell midpoint at timestep ``t``, shape (n_d, n_k).

    VI reads its table; any other belief-driven policy (MCTS, baselines) is
    queried once per midpoint. The recurrent network has no belief input and
    raises ``ImposedBeliefError``; use ``belief_trajectories`` instead.
    """
    if isinstance(policy, RQNPolicy):
        raise ImposedBeliefError("the recurrent network only supports tracked beliefs")
    md, mk = grid.cell_midpoints()
    if isinstance(policy, VIPolicy):
        acts = policy.action_at(t, md, mk)
    else:
        rng = rng if rng is not None else np.random.default_rng(0)
        policy.reset(grid.n_cells, rng)
        # the observation argument is unused by belief-driven policies
        acts = policy.act(t, md.copy(), np.zeros(grid.n_cells, dtype=np.int64), BeliefMean(md, mk, t))
    return np.asarray(acts, dtype=np.int64).reshape(grid.n_d, grid.n_k)


def write_grid_snapshot_csv(path, t: int, grid: BeliefGrid, actions: np.ndarray) -> None:
    write_snapshot_csv(path, t, grid, np.asarray(actions).ravel())


def read_grid_snapshot_csv(path) -> tuple[int, np.ndarray]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise ValueError(f"empty snapshot file {path}")
    n_d = max(int(r["cell_d"]) for r in rows) + 1
    n_k = max(int(r["cell_k"]) for r in rows) + 1
    out = np.zeros((n_d, n_k), dtype=np.int64)
    for r in rows:
        out[int(r["cell_d"]), int(r["cell_k"])] = int(r["action"])
    return int(rows[0]["t"]), out


# tracked beliefs

@dataclass
class BeliefTrajectories:
    """Posterior means and actions along simulated life cycles.

    Arrays are (n, t_end - 1); column i belongs to decision epoch t = i + 1.
    """

    mu_d: np.ndarray
    mu_k: np.ndarray
    observations: np.ndarray
    actions: np.ndarray
    states_d: np.ndarray
    lcc: np.ndarray

    @property
    def n(self) -> int:
        return self.mu_d.shape[0]

    def at(self, t: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Belief cloud (mu_d, mu_k, action) at decision epoch ``t``."""
        i = t - 1
        return self.mu_d[:, i], self.mu_k[:, i], self.actions[:, i]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["trajectory", "t", "observation", "mu_d", "mu_k", "action"])
            for j in range(self.n):
                for i in range(self.mu_d.shape[1]):
                    w.writerow([j, i + 1, repr(float(self.observations[j, i])), repr(float(self.mu_d[j, i])),
                                repr(float(self.mu_k[j, i])), int(self.actions[j, i])])


def read_belief_trajectories_csv(path) -> dict[str, np.ndarray]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    n = max(int(r["trajectory"]) for r in rows) + 1
    m = max(int(r["t"]) for r in rows)
    out = {k: np.zeros((n, m)) for k in ("observation", "mu_d", "mu_k")}
    out["action"] = np.zeros((n, m), dtype=np.int64)
    for r in rows:
        j, i = int(r["trajectory"]), int(r["t"]) - 1
        for k in ("observation", "mu_d", "mu_k"):
            out[k][j, i] = float(r[k])
        out["action"][j, i] = int(r["action"])
    return out


def belief_trajectories(policy, params: ModelParams, n: int, seed: int) -> BeliefTrajectories:
    """Run ``policy`` while recording the analytic posterior means."""
    if n < 1:
        raise ValueError("n must be at least 1")
    batch = simulate_batch(policy, params, n, np.random.default_rng(seed), record_states=True, record_beliefs=True)
    T = params.t_end
    return BeliefTrajectories(
        mu_d=batch.beliefs[:, :, 0],
        mu_k=batch.beliefs[:, :, 1],
        observations=batch.observations,
        actions=batch.actions[:, 1:T].astype(np.int64),
        states_d=batch.states[:, 1:T, 0],
        lcc=batch.discounted_lcc,
    )


def ordering_holds(reference: float, other: float, other_se: float, n_se: float = 3.0) -> bool:
    """reference <= other + n_se * SE."""
    return reference <= other + n_se * other_se


def require_file(path: str | Path, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"missing {what}: {p}")
    return p
