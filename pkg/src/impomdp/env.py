"""Deterioration dynamics, observations and life-cycle cost accounting.

The hidden state is a deterioration level ``d`` and a deterioration rate
``k``. Without intervention ``d`` grows by ``k`` every year. The component is
failed while ``d > d_cr`` and then pays an annual failure cost.

Timeline of one life cycle (``T = t_end``)::

    t = 0        failure check, forced do-nothing action, transition
    t = 1..T-1   failure check, noisy observation, policy decision,
                 action cost, transition
    t = T        failure check only
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path
from typing import TYPE_CHECKING, Protocol

import numpy as np

from .config import dataclass_from_mapping, read_config

if TYPE_CHECKING:
    from .belief import BeliefMean, CovarianceSchedule


class Action(IntEnum):
    DO_NOTHING = 0
    REDUCE_RATE = 1
    IMPROVE_STATE = 2
    REPLACE = 3


N_ACTIONS = len(Action)


class InvalidActionError(ValueError):
    pass


@dataclass(frozen=True)
class ModelParams:
    mu_d0: float = -132.64
    mu_k0: float = 6.4
    sigma_d0: float = 20.85
    sigma_k0: float = 1.0
    delta_d: float = 10.5
    delta_k: float = 0.2
    cost_a: tuple[float, ...] = (0.0, 1.0, 5.0, 100.0)
    cost_f: float = 150.0
    gamma: float = 1.0 / 1.02
    d_cr: float = 0.0
    t_end: int = 20
    sigma_e: float = 50.0

    def __post_init__(self):
        object.__setattr__(self, "cost_a", tuple(float(c) for c in self.cost_a))
        if len(self.cost_a) != N_ACTIONS:
            raise ValueError("cost_a needs one entry per action (4)")
        if self.sigma_d0 < 0 or self.sigma_k0 < 0:
            raise ValueError("initial standard deviations must be nonnegative")
        if self.sigma_e < 0:
            raise ValueError("sigma_e must be nonnegative")
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError("gamma must lie in (0, 1]")
        if self.t_end < 2:
            raise ValueError("t_end must be at least 2")
        if self.cost_f < 0 or min(self.cost_a) < 0:
            raise ValueError("costs must be nonnegative")

    def replace(self, **changes) -> "ModelParams":
        return dataclasses.replace(self, **changes)

    @property
    def cost_vector(self) -> np.ndarray:
        return np.asarray(self.cost_a, dtype=float)

    @property
    def discounts(self) -> np.ndarray:
        """gamma**t for t = 0..t_end."""
        return self.gamma ** np.arange(self.t_end + 1)

    @classmethod
    def from_mapping(cls, mapping) -> "ModelParams":
        return dataclass_from_mapping(cls, mapping)

    @classmethod
    def from_file(cls, path: str | Path) -> "ModelParams":
        return cls.from_mapping(read_config(path))


@dataclass
class SystemState:
    d: float
    k: float


def sample_initial(params: ModelParams, rng: np.random.Generator) -> SystemState:
    d, k = sample_initial_arrays(params, 1, rng)
    return SystemState(float(d[0]), float(k[0]))


def sample_initial_arrays(params: ModelParams, n: int, rng: np.random.Generator):
    z = rng.standard_normal((2, n))
    return params.mu_d0 + params.sigma_d0 * z[0], params.mu_k0 + params.sigma_k0 * z[1]


def transition_arrays(d, k, actions, params: ModelParams, z_d, z_k):
    """Vectorised state transition.

    ``z_d``/``z_k`` are standard normals used only where the action is a
    replacement; callers draw them for every entry so that random-number
    consumption does not depend on the actions taken.
    """
    d = np.asarray(d, dtype=float)
    k = np.asarray(k, dtype=float)
    a = np.asarray(actions)
    new_k = k - params.delta_k * (a == Action.REDUCE_RATE)
    new_d = d + k - params.delta_k * (a == Action.REDUCE_RATE) - params.delta_d * (a == Action.IMPROVE_STATE)
    k0 = params.mu_k0 + params.sigma_k0 * np.asarray(z_k)
    d0 = params.mu_d0 + params.sigma_d0 * np.asarray(z_d)
    replaced = a == Action.REPLACE
    new_d = np.where(replaced, d0 + k0, new_d)
    new_k = np.where(replaced, k0, new_k)
    return new_d, new_k


def transition(state: SystemState, action: int, params: ModelParams, rng: np.random.Generator) -> SystemState:
    _check_actions(action)
    z = rng.standard_normal(2)
    d, k = transition_arrays(state.d, state.k, int(action), params, z[0], z[1])
    return SystemState(float(d), float(k))


def observe(state: SystemState, params: ModelParams, rng: np.random.Generator) -> float:
    return float(state.d + params.sigma_e * rng.standard_normal())


def failure_cost(d, params: ModelParams):
    return params.cost_f * (np.asarray(d) > params.d_cr)


def step_cost(state: SystemState, action: int, params: ModelParams) -> float:
    """Action cost plus the failure cost of the (pre-action) state."""
    _check_actions(action)
    return float(params.cost_a[int(action)] + failure_cost(state.d, params))


def discounted_lcc(costs, gamma: float) -> np.ndarray:
    costs = np.asarray(costs, dtype=float)
    return costs @ (gamma ** np.arange(costs.shape[-1]))


def _check_actions(actions) -> np.ndarray:
    a = np.asarray(actions)
    if a.dtype.kind not in "iu":
        if not np.all(np.isfinite(a)) or not np.all(a == np.round(a)):
            raise InvalidActionError(f"actions must be integers, got {actions!r}")
    if np.any(a < 0) or np.any(a >= N_ACTIONS):
        raise InvalidActionError(f"action index out of range: {actions!r}")
    return a.astype(np.int64)


class Policy(Protocol):
    """Decision rule queried once per decision epoch ``t = 1..t_end-1``.

    ``reset`` is called at the start of every batch of life cycles; ``act``
    receives the current observations, the previous actions and the tracked
    belief means for all ``n`` trajectories and returns ``n`` action indices.
    """

    def reset(self, n: int, rng: np.random.Generator) -> None: ...

    def act(self, t: int, obs: np.ndarray, prev_action: np.ndarray, belief: "BeliefMean") -> np.ndarray: ...


@dataclass
class Trajectory:
    """One simulated life cycle.

    ``observations[i]`` is o_{i+1}; ``actions[t]`` is the action taken at t
    (``actions[0]`` is always do-nothing); cost arrays are indexed by t.
    """

    observations: np.ndarray
    actions: np.ndarray
    failure_costs: np.ndarray
    action_costs: np.ndarray
    discounted_lcc: float
    states: np.ndarray | None = None
    beliefs: np.ndarray | None = None

    @property
    def costs(self) -> np.ndarray:
        return self.failure_costs + self.action_costs


@dataclass
class TrajectoryBatch:
    observations: np.ndarray  # (n, T-1)
    actions: np.ndarray  # (n, T)
    failure_costs: np.ndarray  # (n, T+1)
    action_costs: np.ndarray  # (n, T+1)
    discounted_lcc: np.ndarray  # (n,)
    states: np.ndarray | None = None  # (n, T+1, 2)
    beliefs: np.ndarray | None = None  # (n, T-1, 2), posterior means at t=1..T-1

    @property
    def costs(self) -> np.ndarray:
        return self.failure_costs + self.action_costs

    def __len__(self) -> int:
        return len(self.discounted_lcc)

    def trajectory(self, i: int) -> Trajectory:
        return Trajectory(
            observations=self.observations[i],
            actions=self.actions[i],
            failure_costs=self.failure_costs[i],
            action_costs=self.action_costs[i],
            discounted_lcc=float(self.discounted_lcc[i]),
            states=None if self.states is None else self.states[i],
            beliefs=None if self.beliefs is None else self.beliefs[i],
        )


@dataclass
class _Streams:
    state: np.random.Generator
    obs: np.random.Generator
    policy: np.random.Generator = field(repr=False, default=None)

    @classmethod
    def from_rng(cls, rng: np.random.Generator) -> "_Streams":
        s, o, p = rng.spawn(3)
        return cls(s, o, p)


def simulate_batch(
    policy: Policy,
    params: ModelParams,
    n: int,
    rng: np.random.Generator,
    schedule: "CovarianceSchedule | None" = None,
    record_states: bool = False,
    record_beliefs: bool = False,
) -> TrajectoryBatch:
    """Simulate ``n`` independent life cycles under ``policy``.

    Three child streams are spawned from ``rng``: one for the state process,
    one for measurement noise and one handed to the policy. The noise stream
    draws standard normals that are scaled by ``sigma_e``, so runs that only
    differ in ``sigma_e`` share every underlying variate.
    """
    from . import belief as bf

    if schedule is None:
        schedule = bf.precompute_schedule(params)
    streams = _Streams.from_rng(rng)
    T = params.t_end
    cost_a = params.cost_vector

    fail = np.zeros((n, T + 1))
    act_cost = np.zeros((n, T + 1))
    actions = np.zeros((n, T), dtype=np.int8)
    observations = np.zeros((n, T - 1))
    states = np.zeros((n, T + 1, 2)) if record_states else None
    beliefs = np.zeros((n, T - 1, 2)) if record_beliefs else None

    d, k = sample_initial_arrays(params, n, streams.state)
    prev = np.zeros(n, dtype=np.int64)
    mu_d = np.full(n, params.mu_d0)
    mu_k = np.full(n, params.mu_k0)
    policy.reset(n, streams.policy)

    for t in range(T + 1):
        if states is not None:
            states[:, t, 0] = d
            states[:, t, 1] = k
        fail[:, t] = failure_cost(d, params)
        if t == T:
            break
        if t == 0:
            a = prev
        else:
            o = d + params.sigma_e * streams.obs.standard_normal(n)
            observations[:, t - 1] = o
            pd_, pk_ = bf.prior_mean_arrays(mu_d, mu_k, prev, params)
            mu_d, mu_k = bf.posterior_mean_arrays(pd_, pk_, o, schedule, t)
            if beliefs is not None:
                beliefs[:, t - 1, 0] = mu_d
                beliefs[:, t - 1, 1] = mu_k
            a = _check_actions(policy.act(t, o, prev, bf.BeliefMean(mu_d, mu_k, t)))
            if a.shape != (n,):
                a = np.broadcast_to(a, (n,)).astype(np.int64)
            act_cost[:, t] = cost_a[a]
        actions[:, t] = a
        z = streams.state.standard_normal((2, n))
        d, k = transition_arrays(d, k, a, params, z[0], z[1])
        prev = a

    lcc = (fail + act_cost) @ params.discounts
    return TrajectoryBatch(observations, actions, fail, act_cost, lcc, states, beliefs)


def simulate_trajectory(policy: Policy, params: ModelParams, rng: np.random.Generator, schedule=None) -> Trajectory:
    batch = simulate_batch(policy, params, 1, rng, schedule=schedule, record_states=True, record_beliefs=True)
    return batch.trajectory(0)


class ConstantPolicy:
    """Always returns the same action, ignoring all inputs."""

    def __init__(self, action: int):
        self.action = int(_check_actions(action))
        self.name = f"always-a{self.action}"

    def reset(self, n, rng):
        self._n = n

    def act(self, t, obs, prev_action, belief):
        return np.full(len(obs), self.action, dtype=np.int64)


class RandomPolicy:
    """Uniformly random action at every epoch."""

    name = "random"

    def reset(self, n, rng):
        self._rng = rng

    def act(self, t, obs, prev_action, belief):
        return self._rng.integers(0, N_ACTIONS, size=len(obs))
