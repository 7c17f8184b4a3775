"""Epoch loop: epsilon-greedy collection, Bellman targets, one Adam step.

Each epoch simulates a fresh batch of life cycles with the current network
as behaviour policy, replays the batch through the network and through a
frozen target copy, and takes one optimiser step on

    (1/B) * sum_i sum_t (q_t[a_t] - y_t)^2 + weight_decay * sum(w^2)

with ``y_t = c_t + gamma * min_a q_target_{t+1}[a]`` for t = 1..T-2 and
``y_{T-1} = c_{T-1} + gamma * c_T`` at the last decision. Here
``c_t`` is the failure cost at t plus the cost of the action taken at t.
Costs are divided by ``cost_scale`` before regression, so the network
predicts Q / cost_scale.
"""
from __future__ import annotations

import csv
import itertools
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from ..config import dataclass_from_mapping
from ..env import ModelParams, TrajectoryBatch, simulate_batch
from .network import NetworkShape, RQNetwork
from .optim import Adam
from .policy import RQNPolicy

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, history: list | None = None):
        super().__init__(message)
        self.history = history or []


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    amsgrad: bool = True
    batch_size: int = 500
    max_epochs: int = 500
    target_update_period: int = 3
    epsilon_max: float = 0.5
    epsilon_step: float = 0.1
    epsilon_decay_every: int | None = None
    weight_decay: float = 0.0
    lr_step: int = 100
    lr_factor: float = 0.5
    patience: int = 50
    divergence_patience: int = 3
    cost_scale: float = 100.0
    obs_center: float | None = None
    obs_scale: float | None = None
    eval_every: int = 0
    eval_n: int = 1000

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if self.max_epochs < 0:
            raise ValueError("max_epochs must be nonnegative")
        if self.target_update_period < 1:
            raise ValueError("target_update_period must be positive")
        if not 0.0 <= self.epsilon_max <= 1.0:
            raise ValueError("epsilon_max must lie in [0, 1]")
        if self.epsilon_step <= 0:
            raise ValueError("epsilon_step must be positive")
        if self.epsilon_decay_every is not None and self.epsilon_decay_every < 1:
            raise ValueError("epsilon_decay_every must be positive")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be nonnegative")
        if self.lr <= 0 or self.lr_step < 1 or self.lr_factor <= 0:
            raise ValueError("invalid learning-rate schedule")
        if self.patience < 1 or self.divergence_patience < 1:
            raise ValueError("patience values must be positive")
        if self.cost_scale <= 0:
            raise ValueError("cost_scale must be positive")

    @classmethod
    def from_mapping(cls, mapping, prefix: str = "rqn_") -> "TrainConfig":
        return dataclass_from_mapping(cls, mapping, prefix=prefix)

    def decay_every(self) -> int:
        if self.epsilon_decay_every is not None:
            return self.epsilon_decay_every
        n_steps = round(self.epsilon_max / self.epsilon_step)
        if n_steps == 0:
            return 1
        return max(1, math.ceil(self.max_epochs / (10 * n_steps)))


def epsilon_at(epoch: int, cfg: TrainConfig) -> float:
    """Linear decrease by ``epsilon_step`` every ``decay_every()`` epochs, floored at 0."""
    k = epoch // cfg.decay_every()
    return max(0.0, round(cfg.epsilon_max - cfg.epsilon_step * k, 12))


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    return cfg.lr * cfg.lr_factor ** (epoch // cfg.lr_step)


def input_normalisation(params: ModelParams, cfg: TrainConfig) -> tuple[float, float]:
    """Centre and scale of the observation input.

    Defaults: the mid-life mean of the do-nothing deterioration and the
    combined spread of initial condition, drift over the horizon and noise.
    """
    center = cfg.obs_center
    if center is None:
        center = params.mu_d0 + params.mu_k0 * params.t_end / 2
    scale = cfg.obs_scale
    if scale is None:
        scale = math.sqrt(params.sigma_d0**2 + (params.mu_k0 * params.t_end) ** 2 / 12 + params.sigma_e**2)
    return float(center), float(scale)


def new_network(params: ModelParams, cfg: TrainConfig, rng: np.random.Generator, shape: NetworkShape = NetworkShape()) -> RQNetwork:
    center, scale = input_normalisation(params, cfg)
    return RQNetwork.initialise(rng, shape, center, scale)


def collect_batch(network: RQNetwork, epsilon: float, params: ModelParams, batch_size: int, rng: np.random.Generator, schedule=None) -> TrajectoryBatch:
    """Simulate ``batch_size`` life cycles with the epsilon-greedy network."""
    return simulate_batch(RQNPolicy(network, epsilon), params, batch_size, rng, schedule=schedule)


@dataclass
class LossTerms:
    total: float
    mse: float
    penalty: float
    residuals: np.ndarray
    dq: np.ndarray
    forward: object


def lcc_mse(network: RQNetwork, target: RQNetwork, batch: TrajectoryBatch, gamma: float, weight_decay: float, cost_scale: float = 1.0) -> LossTerms:
    """LCC-accumulated MSE cost of a batch plus the L2 penalty, and dcost/dq."""
    T = batch.actions.shape[1]
    obs = batch.observations
    prev = batch.actions[:, : T - 1]
    sel = batch.actions[:, 1:T].astype(np.int64)
    costs = batch.costs / cost_scale
    out = network.forward(obs, prev)
    q_next = target.forward(obs, prev).q
    y = costs[:, 1:T].copy()
    y[:, :-1] += gamma * q_next[:, 1:].min(axis=-1)
    y[:, -1] += gamma * costs[:, T]
    q_sel = np.take_along_axis(out.q, sel[..., None], axis=-1)[..., 0]
    r = q_sel - y
    B = len(obs)
    mse = float(np.sum(r * r) / B)
    penalty = weight_decay * network.squared_norm()
    dq = np.zeros_like(out.q)
    np.put_along_axis(dq, sel[..., None], (2.0 * r / B)[..., None], axis=-1)
    return LossTerms(mse + penalty, mse, penalty, r, dq, out)


def loss_gradients(network: RQNetwork, terms: LossTerms, weight_decay: float) -> dict[str, np.ndarray]:
    grads = network.backward(terms.forward, terms.dq)
    if weight_decay:
        for name, p in network.params.items():
            grads[name] = grads[name] + 2.0 * weight_decay * p
    return grads


def train_epoch(network: RQNetwork, target: RQNetwork, batch: TrajectoryBatch, cfg: TrainConfig, optimizer: Adam, gamma: float) -> float:
    """One optimiser step on the batch; returns the epoch cost (nan skips the step)."""
    terms = lcc_mse(network, target, batch, gamma, cfg.weight_decay, cfg.cost_scale)
    if not math.isfinite(terms.total):
        return float("nan")
    grads = loss_gradients(network, terms, cfg.weight_decay)
    if not all(np.all(np.isfinite(g)) for g in grads.values()):
        return float("nan")
    optimizer.step(network.params, grads)
    return terms.total


@dataclass
class EpochRecord:
    epoch: int
    cost: float
    epsilon: float
    lr: float
    batch_mean_lcc: float
    eval_mean_lcc: float = float("nan")


@dataclass
class TrainResult:
    network: RQNetwork
    config: TrainConfig
    history: list[EpochRecord] = field(default_factory=list)
    stop_reason: str = "max_epochs"

    @property
    def epochs(self) -> int:
        return len(self.history)

    def write_log(self, path: str | Path) -> None:
        write_training_log(path, self.history)


def write_training_log(path, history) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "cost", "epsilon", "lr", "batch_mean_lcc", "eval_mean_lcc"])
        for r in history:
            w.writerow([r.epoch, repr(r.cost), repr(r.epsilon), repr(r.lr), repr(r.batch_mean_lcc), repr(r.eval_mean_lcc)])


def read_training_log(path) -> list[EpochRecord]:
    with open(path, newline="", encoding="utf-8") as fh:
        return [
            EpochRecord(int(r["epoch"]), float(r["cost"]), float(r["epsilon"]), float(r["lr"]),
                        float(r["batch_mean_lcc"]), float(r["eval_mean_lcc"]))
            for r in csv.DictReader(fh)
        ]


def greedy_mean_lcc(network: RQNetwork, params: ModelParams, n: int, rng: np.random.Generator) -> tuple[float, float]:
    lcc = simulate_batch(RQNPolicy(network), params, n, rng).discounted_lcc
    se = float(lcc.std(ddof=1) / math.sqrt(n)) if n > 1 else float("nan")
    return float(lcc.mean()), se


def train(params: ModelParams, cfg: TrainConfig, rng: np.random.Generator, network: RQNetwork | None = None) -> TrainResult:
    """Full training run. Raises ``TrainingDiverged`` after too many non-finite epochs.

    The early-stopping window opens once epsilon has decayed to zero.
    """
    init_rng, collect_rng, eval_rng = rng.spawn(3)
    if network is None:
        network = new_network(params, cfg, init_rng)
    result = TrainResult(network, cfg)
    if cfg.max_epochs == 0:
        return result
    from ..belief import precompute_schedule

    schedule = precompute_schedule(params)
    optimizer = Adam(network.params, cfg.lr, (cfg.beta1, cfg.beta2), amsgrad=cfg.amsgrad)
    target = network.copy()
    best = math.inf
    best_epoch = 0
    bad = 0
    for epoch in range(cfg.max_epochs):
        if epoch > 0 and epoch % cfg.target_update_period == 0:
            target = network.copy()
        eps = epsilon_at(epoch, cfg)
        optimizer.lr = lr_at(epoch, cfg)
        batch = collect_batch(network, eps, params, cfg.batch_size, collect_rng, schedule)
        cost = train_epoch(network, target, batch, cfg, optimizer, params.gamma)
        rec = EpochRecord(epoch, cost, eps, optimizer.lr, float(batch.discounted_lcc.mean()))
        if cfg.eval_every and (epoch + 1) % cfg.eval_every == 0:
            rec.eval_mean_lcc = greedy_mean_lcc(network, params, cfg.eval_n, eval_rng)[0]
        result.history.append(rec)
        log.debug("epoch %d cost %.6g eps %.2f lcc %.3f", epoch, cost, eps, rec.batch_mean_lcc)
        if not math.isfinite(cost):
            bad += 1
            if bad >= cfg.divergence_patience:
                result.stop_reason = "diverged"
                raise TrainingDiverged(f"non-finite cost for {bad} consecutive epochs", result.history)
            continue
        bad = 0
        if eps > 0:
            # losses on exploring batches are not comparable with greedy ones
            continue
        if cost < best:
            best = cost
            best_epoch = epoch
        elif epoch - best_epoch >= cfg.patience:
            result.stop_reason = "early_stopping"
            break
    return result


GRID_KEYS = ("weight_decay", "epsilon_max", "lr_step", "lr_factor")


@dataclass
class GridEntry:
    config: TrainConfig
    mean_lcc: float
    standard_error: float
    epochs: int
    stop_reason: str


@dataclass
class GridSearchResult:
    best: GridEntry
    best_network: RQNetwork
    leaderboard: list[GridEntry]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(list(GRID_KEYS) + ["mean_lcc", "standard_error", "epochs", "stop_reason"])
            for e in self.leaderboard:
                w.writerow([repr(getattr(e.config, k)) for k in GRID_KEYS]
                           + [repr(e.mean_lcc), repr(e.standard_error), e.epochs, e.stop_reason])


def grid_search(params: ModelParams, base: TrainConfig, space: dict[str, list], rng: np.random.Generator, n_eval: int = 1000) -> GridSearchResult:
    """Train one network per grid point and keep the lowest MC mean LCC.

    Every candidate is trained from the same seed and evaluated on the same
    evaluation seed, so entries differ only through their settings.
    """
    unknown = set(space) - set(GRID_KEYS)
    if unknown:
        raise ValueError(f"not searchable: {sorted(unknown)}")
    if not space or any(len(v) == 0 for v in space.values()):
        raise ValueError("empty search space")
    train_seed, eval_seed = (int(s) for s in rng.integers(0, 2**63 - 1, size=2))
    keys = list(space)
    entries: list[GridEntry] = []
    nets = []
    for combo in itertools.product(*(space[k] for k in keys)):
        cfg = replace(base, **dict(zip(keys, combo)))
        try:
            res = train(params, cfg, np.random.default_rng(train_seed))
            mean, se = greedy_mean_lcc(res.network, params, n_eval, np.random.default_rng(eval_seed))
            entries.append(GridEntry(cfg, mean, se, res.epochs, res.stop_reason))
            nets.append(res.network)
        except TrainingDiverged as exc:
            entries.append(GridEntry(cfg, math.inf, math.nan, len(exc.history), "diverged"))
            nets.append(None)
        log.info("grid point %s -> %.4f", dict(zip(keys, combo)), entries[-1].mean_lcc)
    i = min(range(len(entries)), key=lambda j: entries[j].mean_lcc)
    if nets[i] is None:
        raise TrainingDiverged("every grid point diverged")
    return GridSearchResult(entries[i], nets[i], entries)
