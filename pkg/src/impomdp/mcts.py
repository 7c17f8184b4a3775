"""Online UCT planning over bucketed observations.

A fresh tree is grown at every decision epoch. Each iteration samples a
state from the current Gaussian belief, descends through the tree by UCT
(costs are minimised, so the exploration bonus is subtracted), adds one
new node and scores it with uniform-random rollouts. Returns are discounted
back to the root and folded into per-action running means.

The search loop is compiled with numba. The tree lives in flat arrays
(an arena) indexed by node id; ``children[node, action, bucket]`` holds the
child id or -1.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numba import njit

from .belief import BeliefMean, CovarianceSchedule, precompute_schedule
from .config import dataclass_from_mapping
from .env import ModelParams


@dataclass(frozen=True)
class MctsParams:
    c: float = 1.0
    n_tree: int = 10_000
    n_rollout: int = 10
    n_buckets: int = 20
    d_fl: float = -159.36
    d_ce: float = 26.67

    def __post_init__(self):
        if self.c < 0:
            raise ValueError("exploration constant must be nonnegative")
        if self.n_tree < 1:
            raise ValueError("n_tree must be positive")
        if self.n_rollout < 1:
            raise ValueError("n_rollout must be positive")
        if self.n_buckets < 3:
            raise ValueError("need at least 3 observation buckets")
        if not self.d_fl < self.d_ce:
            raise ValueError("d_fl must be below d_ce")

    @classmethod
    def from_mapping(cls, mapping, prefix: str = "mcts_") -> "MctsParams":
        return dataclass_from_mapping(cls, mapping, prefix=prefix)


@njit(cache=True)
def _bucket(o, d_fl, d_ce, n_buckets):
    if o < d_fl:
        return 0
    if o >= d_ce:
        return n_buckets - 1
    w = (d_ce - d_fl) / (n_buckets - 2)
    b = 1 + int(math.floor((o - d_fl) / w))
    # rounding right below d_ce can land on the last bucket's index
    return min(b, n_buckets - 2)


def bucketize(o, params: MctsParams):
    """Observation bucket; values below d_fl / at or above d_ce go to the end buckets."""
    if np.ndim(o) == 0:
        return _bucket(float(o), params.d_fl, params.d_ce, params.n_buckets)
    flat = np.asarray(o, dtype=float).ravel()
    out = np.array([_bucket(v, params.d_fl, params.d_ce, params.n_buckets) for v in flat], dtype=np.int64)
    return out.reshape(np.shape(o))


@njit(cache=True)
def _uct_pick(q, na, n, c):
    n_unvisited = 0
    for a in range(q.shape[0]):
        if na[a] == 0:
            n_unvisited += 1
    if n_unvisited > 0:
        pick = np.random.randint(n_unvisited)
        for a in range(q.shape[0]):
            if na[a] == 0:
                if pick == 0:
                    return a
                pick -= 1
    best = 0
    best_val = np.inf
    log_n = math.log(n)
    for a in range(q.shape[0]):
        val = q[a] - c * math.sqrt(log_n / na[a])
        if val < best_val:
            best_val = val
            best = a
    return best


@njit(cache=True)
def _seed(seed):
    np.random.seed(seed)


def uct_select(q, n_visits, c: float, seed: int | None = None) -> int:
    """argmin_a Q - c*sqrt(ln N / N_a); unvisited actions first, chosen at random."""
    q = np.asarray(q, dtype=float)
    na = np.asarray(n_visits, dtype=np.int64)
    if seed is not None:
        _seed(seed)
    return int(_uct_pick(q, na, max(int(na.sum()), 1), c))


@njit(cache=True)
def _step(d, k, a, mu_d0, mu_k0, sigma_d0, sigma_k0, delta_d, delta_k):
    if a == 0:
        return d + k, k
    if a == 1:
        return d + k - delta_k, k - delta_k
    if a == 2:
        return d + k - delta_d, k
    k_new = mu_k0 + sigma_k0 * np.random.standard_normal()
    d_new = mu_d0 + sigma_d0 * np.random.standard_normal()
    return d_new + k_new, k_new


@njit(cache=True)
def _rollout(d0, k0, t0, n_rollout, model, cost_a):
    """Mean discounted cost from (d0, k0) at t0 to the horizon under random actions."""
    mu_d0, mu_k0, sigma_d0, sigma_k0, delta_d, delta_k, cost_f, gamma, d_cr, t_end = (
        model[0], model[1], model[2], model[3], model[4], model[5], model[6], model[7], model[8], int(model[9]))
    total = 0.0
    for _ in range(n_rollout):
        d = d0
        k = k0
        disc = 1.0
        ret = 0.0
        for t in range(t0, t_end + 1):
            if d > d_cr:
                ret += disc * cost_f
            if t == t_end:
                break
            a = np.random.randint(4)
            ret += disc * cost_a[a]
            d, k = _step(d, k, a, mu_d0, mu_k0, sigma_d0, sigma_k0, delta_d, delta_k)
            disc *= gamma
        total += ret
    return total / n_rollout


@njit(cache=True)
def _search(mu_d, mu_k, sd, sk, rho, t0, model, cost_a, sigma_e, c, n_tree, n_rollout, d_fl, d_ce, n_buckets, seed):
    np.random.seed(seed)
    mu_d0, mu_k0, sigma_d0, sigma_k0, delta_d, delta_k, cost_f, gamma, d_cr, t_end = (
        model[0], model[1], model[2], model[3], model[4], model[5], model[6], model[7], model[8], int(model[9]))
    max_nodes = n_tree + 1
    node_t = np.zeros(max_nodes, dtype=np.int64)
    n_node = np.zeros(max_nodes, dtype=np.int64)
    n_act = np.zeros((max_nodes, 4), dtype=np.int64)
    q = np.zeros((max_nodes, 4))
    children = np.full((max_nodes, 4, n_buckets), -1, dtype=np.int64)
    root_min = np.full(4, np.inf)
    root_max = np.full(4, -np.inf)
    node_t[0] = t0
    n_nodes = 1
    depth = t_end - t0 + 1
    path_node = np.zeros(depth, dtype=np.int64)
    path_act = np.zeros(depth, dtype=np.int64)
    path_cost = np.zeros(depth)
    cross = math.sqrt(max(0.0, 1.0 - rho * rho))

    for _ in range(n_tree):
        z1 = np.random.standard_normal()
        z2 = np.random.standard_normal()
        d = mu_d + sd * z1
        k = mu_k + sk * (rho * z1 + cross * z2)
        node = 0
        t = t0
        n_path = 0
        leaf = 0.0
        while True:
            fail = cost_f if d > d_cr else 0.0
            if t == t_end:
                leaf = fail
                break
            a = _uct_pick(q[node], n_act[node], max(n_node[node], 1), c)
            path_node[n_path] = node
            path_act[n_path] = a
            path_cost[n_path] = fail + cost_a[a]
            n_path += 1
            d, k = _step(d, k, a, mu_d0, mu_k0, sigma_d0, sigma_k0, delta_d, delta_k)
            t += 1
            if t < t_end:
                b = _bucket(d + sigma_e * np.random.standard_normal(), d_fl, d_ce, n_buckets)
            else:
                b = 0  # no observation at the horizon
            child = children[node, a, b]
            if child < 0:
                if n_nodes < max_nodes:
                    children[node, a, b] = n_nodes
                    node_t[n_nodes] = t
                    n_nodes += 1
                leaf = _rollout(d, k, t, n_rollout, model, cost_a)
                break
            node = child

        ret = leaf
        for i in range(n_path - 1, -1, -1):
            ret = path_cost[i] + gamma * ret
            nd = path_node[i]
            a = path_act[i]
            n_act[nd, a] += 1
            n_node[nd] += 1
            q[nd, a] += (ret - q[nd, a]) / n_act[nd, a]
            if i == 0:
                if ret < root_min[a]:
                    root_min[a] = ret
                if ret > root_max[a]:
                    root_max[a] = ret
    return node_t[:n_nodes], n_node[:n_nodes], n_act[:n_nodes], q[:n_nodes], children[:n_nodes], root_min, root_max


def _model_vector(params: ModelParams) -> np.ndarray:
    return np.array([
        params.mu_d0, params.mu_k0, params.sigma_d0, params.sigma_k0, params.delta_d, params.delta_k,
        params.cost_f, params.gamma, params.d_cr, float(params.t_end),
    ])


def rollout(d: float, k: float, t: int, params: ModelParams, n_rollout: int, seed: int) -> float:
    """Mean discounted random-action cost from state (d, k) at t; discounting restarts at t."""
    if not 0 <= t <= params.t_end:
        raise ValueError(f"t must lie in 0..{params.t_end}")
    _seed(seed)
    return float(_rollout(float(d), float(k), int(t), int(n_rollout), _model_vector(params), params.cost_vector))


@dataclass
class SearchTree:
    """Arena view of a finished search; row 0 is the root."""

    node_t: np.ndarray
    visits: np.ndarray
    action_visits: np.ndarray
    q: np.ndarray
    children: np.ndarray
    root_return_min: np.ndarray
    root_return_max: np.ndarray

    @property
    def n_nodes(self) -> int:
        return len(self.node_t)

    @property
    def root_q(self) -> np.ndarray:
        q = self.q[0].copy()
        q[self.action_visits[0] == 0] = np.inf
        return q

    def recommendation(self) -> int:
        return int(np.argmin(self.root_q))


def tree_search(
    belief: BeliefMean,
    t: int,
    params: ModelParams,
    mcts: MctsParams,
    rng: np.random.Generator,
    schedule: CovarianceSchedule | None = None,
    return_tree: bool = False,
):
    """Plan one decision at timestep ``t`` from the belief means.

    Returns ``(action, root_q)``; unvisited root actions have Q = inf.
    With ``return_tree`` the full ``SearchTree`` is appended.
    """
    if not 0 <= t <= params.t_end - 1:
        raise ValueError(f"planning needs 0 <= t <= {params.t_end - 1}, got {t}")
    if schedule is None:
        schedule = precompute_schedule(params)
    rho = float(schedule.rho_post[t])
    if abs(rho) > 1 + 1e-12:
        raise ValueError(f"invalid correlation {rho} at t={t}")
    seed = int(rng.integers(0, 2**32 - 1))
    out = _search(
        float(belief.mu_d), float(belief.mu_k),
        float(schedule.sigma_d_post[t]), float(schedule.sigma_k_post[t]), min(max(rho, -1.0), 1.0),
        int(t), _model_vector(params), params.cost_vector, float(params.sigma_e),
        float(mcts.c), int(mcts.n_tree), int(mcts.n_rollout), float(mcts.d_fl), float(mcts.d_ce), int(mcts.n_buckets),
        seed,
    )
    tree = SearchTree(*out)
    action = tree.recommendation()
    if return_tree:
        return action, tree.root_q, tree
    return action, tree.root_q


class MCTSPolicy:
    """Re-plans from scratch at every epoch from the tracked belief.

    Each trajectory of a batch gets its own generator, spawned at ``reset``,
    so a trajectory's searches do not depend on the rest of the batch.
    """

    name = "mcts"

    def __init__(self, params: ModelParams, mcts: MctsParams | None = None, schedule: CovarianceSchedule | None = None):
        self.params = params
        self.mcts = mcts or MctsParams()
        self.schedule = schedule if schedule is not None else precompute_schedule(params)
        self._rngs: list[np.random.Generator] = []

    def reset(self, n, rng):
        self._rngs = rng.spawn(n)

    def act(self, t, obs, prev_action, belief: BeliefMean):
        mu_d = np.broadcast_to(belief.mu_d, np.shape(obs))
        mu_k = np.broadcast_to(belief.mu_k, np.shape(obs))
        out = np.empty(len(obs), dtype=np.int64)
        for i in range(len(obs)):
            b = BeliefMean(float(mu_d[i]), float(mu_k[i]), t)
            out[i] = tree_search(b, t, self.params, self.mcts, self._rngs[i], self.schedule)[0]
        return out


