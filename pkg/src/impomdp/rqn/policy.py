"""The trained network as a (stateful, per-batch) decision rule."""
from __future__ import annotations

import numpy as np

from ..env import N_ACTIONS
from .network import RQNetwork


class RQNPolicy:
    """Greedy (or epsilon-greedy) argmin over the network's Q-values.

    The recurrent state is reset by ``reset`` and advanced once per call to
    ``act``, so calls must come in timeline order t = 1, 2, ...
    """

    name = "rqn"

    def __init__(self, network: RQNetwork, epsilon: float = 0.0):
        if not 0.0 <= epsilon <= 1.0:
            raise ValueError("epsilon must lie in [0, 1]")
        self.network = network
        self.epsilon = epsilon
        self._state = None
        self._next_t = None
        self._rng = None

    def reset(self, n, rng):
        self._state = self.network.initial_state(n)
        self._next_t = 1
        self._rng = rng

    def q_values(self, t, obs, prev_action) -> np.ndarray:
        if self._next_t is None:
            raise RuntimeError("reset() must be called before the first decision")
        if t != self._next_t:
            raise RuntimeError(f"expected decision epoch {self._next_t}, got {t}")
        obs = np.asarray(obs, dtype=float).reshape(-1, 1)
        prev = np.asarray(prev_action, dtype=np.int64).reshape(-1, 1)
        out = self.network.forward(obs, prev, self._state)
        self._state = out.state
        self._next_t += 1
        return out.q[:, 0]

    def act(self, t, obs, prev_action, belief=None):
        q = self.q_values(t, obs, prev_action)
        # argmin keeps the lowest index on exact ties
        actions = np.argmin(q, axis=1)
        if self.epsilon > 0:
            explore = self._rng.random(len(actions)) < self.epsilon
            actions = np.where(explore, self._rng.integers(0, N_ACTIONS, len(actions)), actions)
        return actions.astype(np.int64)
