"""Recurrent dueling Q-network with hand-written backpropagation through time.

Two input streams (the observation and the one-hot previous action) pass
through two leaky-ReLU layers each, are concatenated into an LSTM, then
through one more leaky-ReLU layer into a scalar value head and a
four-way advantage head. Q-values are ``v + adv - mean(adv)``.

Everything is float64 numpy. Dense weights are stored as (fan_in, fan_out)
so a layer is ``x @ w + b``. The LSTM keeps separate input-path and
recurrent-path biases; gate blocks are ordered input, forget, candidate,
output.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..env import N_ACTIONS

LEAK = 0.3


@dataclass(frozen=True)
class NetworkShape:
    fc1: int = 20
    fc2: int = 25
    hidden: int = 80
    fc3: int = 160

    def layer_shapes(self) -> dict[str, tuple[int, ...]]:
        h = self.hidden
        x = 2 * self.fc2
        return {
            "fc1_obs.w": (1, self.fc1),
            "fc1_obs.b": (self.fc1,),
            "fc1_act.w": (N_ACTIONS, self.fc1),
            "fc1_act.b": (self.fc1,),
            "fc2_obs.w": (self.fc1, self.fc2),
            "fc2_obs.b": (self.fc2,),
            "fc2_act.w": (self.fc1, self.fc2),
            "fc2_act.b": (self.fc2,),
            "lstm.w_ih": (x, 4 * h),
            "lstm.w_hh": (h, 4 * h),
            "lstm.b_ih": (4 * h,),
            "lstm.b_hh": (4 * h,),
            "fc3.w": (h, self.fc3),
            "fc3.b": (self.fc3,),
            "value.w": (self.fc3, 1),
            "value.b": (1,),
            "advantage.w": (self.fc3, N_ACTIONS),
            "advantage.b": (N_ACTIONS,),
        }


def param_count_formula(shape: NetworkShape = NetworkShape()) -> int:
    """Closed-form scalar count, independent of ``layer_shapes``."""
    x = 2 * shape.fc2
    fc1 = (1 + 1) * shape.fc1 + (N_ACTIONS + 1) * shape.fc1
    fc2 = 2 * (shape.fc1 + 1) * shape.fc2
    lstm = 4 * ((x + shape.hidden) * shape.hidden + 2 * shape.hidden)
    fc3 = (shape.hidden + 1) * shape.fc3
    heads = (shape.fc3 + 1) * 1 + (shape.fc3 + 1) * N_ACTIONS
    return fc1 + fc2 + lstm + fc3 + heads


def _leaky(x):
    return np.where(x > 0, x, LEAK * x)


def _leaky_grad(x):
    return np.where(x > 0, 1.0, LEAK)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def one_hot(actions, n: int = N_ACTIONS) -> np.ndarray:
    a = np.asarray(actions, dtype=np.int64)
    out = np.zeros(a.shape + (n,))
    np.put_along_axis(out, a[..., None], 1.0, axis=-1)
    return out


@dataclass
class RecurrentState:
    hidden: np.ndarray
    cell: np.ndarray

    @classmethod
    def zeros(cls, n: int, size: int) -> "RecurrentState":
        return cls(np.zeros((n, size)), np.zeros((n, size)))


@dataclass
class ForwardResult:
    q: np.ndarray  # (B, T, 4)
    value: np.ndarray  # (B, T)
    advantage: np.ndarray  # (B, T, 4)
    state: RecurrentState
    cache: dict


class RQNetwork:
    """Parameters plus the fixed observation normalisation of the input.

    ``obs_center``/``obs_scale`` are not trained; the observation stream sees
    ``(o - obs_center) / obs_scale``.
    """

    def __init__(self, params: dict[str, np.ndarray], shape: NetworkShape = NetworkShape(),
                 obs_center: float = 0.0, obs_scale: float = 1.0):
        expected = shape.layer_shapes()
        if list(params) != list(expected):
            raise ValueError("parameter names do not match the network layout")
        for name, arr in params.items():
            if arr.shape != expected[name]:
                raise ValueError(f"{name}: shape {arr.shape} != {expected[name]}")
        if not obs_scale > 0:
            raise ValueError("obs_scale must be positive")
        self.params = {k: np.asarray(v, dtype=np.float64) for k, v in params.items()}
        self.shape = shape
        self.obs_center = float(obs_center)
        self.obs_scale = float(obs_scale)

    @classmethod
    def initialise(cls, rng: np.random.Generator, shape: NetworkShape = NetworkShape(),
                   obs_center: float = 0.0, obs_scale: float = 1.0) -> "RQNetwork":
        """Uniform(+-1/sqrt(fan_in)) for every weight and bias of a layer."""
        params = {}
        fan_in = {"fc1_obs": 1, "fc1_act": N_ACTIONS, "fc2_obs": shape.fc1, "fc2_act": shape.fc1,
                  "lstm": shape.hidden, "fc3": shape.hidden, "value": shape.fc3, "advantage": shape.fc3}
        for name, shp in shape.layer_shapes().items():
            bound = 1.0 / np.sqrt(fan_in[name.split(".")[0]])
            params[name] = rng.uniform(-bound, bound, size=shp)
        return cls(params, shape, obs_center, obs_scale)

    def copy(self) -> "RQNetwork":
        return RQNetwork({k: v.copy() for k, v in self.params.items()}, self.shape, self.obs_center, self.obs_scale)

    def param_count(self) -> int:
        return int(sum(v.size for v in self.params.values()))

    def squared_norm(self) -> float:
        return float(sum(np.sum(v * v) for v in self.params.values()))

    def initial_state(self, n: int) -> RecurrentState:
        return RecurrentState.zeros(n, self.shape.hidden)

    def forward(self, obs, prev_actions, state: RecurrentState | None = None) -> ForwardResult:
        """Run a batch of sequences; ``obs`` is (B, T), ``prev_actions`` (B, T) ints or (B, T, 4) one-hot."""
        p = self.params
        obs = np.asarray(obs, dtype=np.float64)
        if not np.all(np.isfinite(obs)):
            raise ValueError("non-finite observation")
        acts = np.asarray(prev_actions)
        onehot = acts.astype(np.float64) if acts.ndim == 3 else one_hot(acts)
        B, T = obs.shape
        H = self.shape.hidden
        if state is None:
            state = self.initial_state(B)

        o_in = ((obs - self.obs_center) / self.obs_scale)[..., None]
        pre1o = o_in @ p["fc1_obs.w"] + p["fc1_obs.b"]
        z1o = _leaky(pre1o)
        pre2o = z1o @ p["fc2_obs.w"] + p["fc2_obs.b"]
        pre1a = onehot @ p["fc1_act.w"] + p["fc1_act.b"]
        z1a = _leaky(pre1a)
        pre2a = z1a @ p["fc2_act.w"] + p["fc2_act.b"]
        x = np.concatenate([_leaky(pre2o), _leaky(pre2a)], axis=-1)

        xw = x @ p["lstm.w_ih"] + (p["lstm.b_ih"] + p["lstm.b_hh"])
        gates = np.empty((B, T, 4 * H))
        cells = np.empty((B, T, H))
        hid = np.empty((B, T, H))
        h, c = state.hidden, state.cell
        h0, c0 = h, c
        w_hh = p["lstm.w_hh"]
        for t in range(T):
            g = xw[:, t] + h @ w_hh
            g[:, :2 * H] = _sigmoid(g[:, :2 * H])
            g[:, 2 * H:3 * H] = np.tanh(g[:, 2 * H:3 * H])
            g[:, 3 * H:] = _sigmoid(g[:, 3 * H:])
            c = g[:, H:2 * H] * c + g[:, :H] * g[:, 2 * H:3 * H]
            h = g[:, 3 * H:] * np.tanh(c)
            gates[:, t] = g
            cells[:, t] = c
            hid[:, t] = h

        pre3 = hid @ p["fc3.w"] + p["fc3.b"]
        z3 = _leaky(pre3)
        v = (z3 @ p["value.w"] + p["value.b"])[..., 0]
        adv = z3 @ p["advantage.w"] + p["advantage.b"]
        q = dueling_combine(v, adv)
        cache = dict(o_in=o_in, pre1o=pre1o, z1o=z1o, pre2o=pre2o, onehot=onehot, pre1a=pre1a, z1a=z1a,
                     pre2a=pre2a, x=x, gates=gates, cells=cells, hid=hid, h0=h0, c0=c0, pre3=pre3, z3=z3)
        return ForwardResult(q, v, adv, RecurrentState(h, c), cache)

    def backward(self, result: ForwardResult, dq) -> dict[str, np.ndarray]:
        """Gradients of ``sum(dq * q)`` w.r.t. every parameter (full BPTT)."""
        p = self.params
        cc = result.cache
        H = self.shape.hidden
        dq = np.asarray(dq, dtype=np.float64)
        B, T, _ = dq.shape
        g = {}

        dv = dq.sum(axis=-1, keepdims=True)
        dadv = dq - dq.mean(axis=-1, keepdims=True)
        z3 = cc["z3"]
        g["value.w"] = np.einsum("btk,bto->ko", z3, dv)
        g["value.b"] = dv.sum(axis=(0, 1))
        g["advantage.w"] = np.einsum("btk,bto->ko", z3, dadv)
        g["advantage.b"] = dadv.sum(axis=(0, 1))
        dpre3 = (dv @ p["value.w"].T + dadv @ p["advantage.w"].T) * _leaky_grad(cc["pre3"])
        g["fc3.w"] = np.einsum("bth,btk->hk", cc["hid"], dpre3)
        g["fc3.b"] = dpre3.sum(axis=(0, 1))
        dhid = dpre3 @ p["fc3.w"].T

        gates, cells, hid = cc["gates"], cc["cells"], cc["hid"]
        w_hh = p["lstm.w_hh"]
        dgates = np.empty_like(gates)
        dw_hh = np.zeros_like(w_hh)
        dh_next = np.zeros((B, H))
        dc_next = np.zeros((B, H))
        for t in range(T - 1, -1, -1):
            gt = gates[:, t]
            i, f, cand, o = gt[:, :H], gt[:, H:2 * H], gt[:, 2 * H:3 * H], gt[:, 3 * H:]
            c_prev = cells[:, t - 1] if t > 0 else cc["c0"]
            h_prev = hid[:, t - 1] if t > 0 else cc["h0"]
            tc = np.tanh(cells[:, t])
            dh = dhid[:, t] + dh_next
            dc = dc_next + dh * o * (1.0 - tc * tc)
            dg = dgates[:, t]
            dg[:, :H] = dc * cand * i * (1.0 - i)
            dg[:, H:2 * H] = dc * c_prev * f * (1.0 - f)
            dg[:, 2 * H:3 * H] = dc * i * (1.0 - cand * cand)
            dg[:, 3 * H:] = dh * tc * o * (1.0 - o)
            dc_next = dc * f
            dw_hh += h_prev.T @ dg
            dh_next = dg @ w_hh.T
        g["lstm.w_ih"] = np.einsum("btx,btg->xg", cc["x"], dgates)
        g["lstm.w_hh"] = dw_hh
        g["lstm.b_ih"] = dgates.sum(axis=(0, 1))
        g["lstm.b_hh"] = g["lstm.b_ih"].copy()

        dx = dgates @ p["lstm.w_ih"].T
        n2 = self.shape.fc2
        dpre2o = dx[..., :n2] * _leaky_grad(cc["pre2o"])
        dpre2a = dx[..., n2:] * _leaky_grad(cc["pre2a"])
        g["fc2_obs.w"] = np.einsum("btk,btj->kj", cc["z1o"], dpre2o)
        g["fc2_obs.b"] = dpre2o.sum(axis=(0, 1))
        g["fc2_act.w"] = np.einsum("btk,btj->kj", cc["z1a"], dpre2a)
        g["fc2_act.b"] = dpre2a.sum(axis=(0, 1))
        dpre1o = (dpre2o @ p["fc2_obs.w"].T) * _leaky_grad(cc["pre1o"])
        dpre1a = (dpre2a @ p["fc2_act.w"].T) * _leaky_grad(cc["pre1a"])
        g["fc1_obs.w"] = np.einsum("btk,btj->kj", cc["o_in"], dpre1o)
        g["fc1_obs.b"] = dpre1o.sum(axis=(0, 1))
        g["fc1_act.w"] = np.einsum("btk,btj->kj", cc["onehot"], dpre1a)
        g["fc1_act.b"] = dpre1a.sum(axis=(0, 1))
        return {name: g[name] for name in p}


def dueling_combine(value, advantage) -> np.ndarray:
    """q_a = v + adv_a - mean(adv) over the last axis."""
    advantage = np.asarray(advantage, dtype=np.float64)
    return np.asarray(value, dtype=np.float64)[..., None] + advantage - advantage.mean(axis=-1, keepdims=True)
