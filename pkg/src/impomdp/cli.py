"""Command line entry point.

Every subcommand reads one flat ``key = value`` config file (model keys
bare, method keys prefixed ``vi_``, ``mcts_``, ``rqn_``, ``sweep_`` and
``grid_``), writes UTF-8 CSV files plus ``summary.json`` into ``--out`` and
exits with 0 on success, 2 on a configuration error and 3 when training
diverges or a run fails.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import math
import sys
import time
from pathlib import Path

import numpy as np

from . import harness as H
from .belief import BeliefMean, precompute_schedule
from .config import ConfigError, dataclass_from_mapping, parse_config, read_config
from .env import ModelParams
from .mcts import MCTSPolicy, MctsParams, tree_search
from .rqn import (
    CheckpointError,
    RQNPolicy,
    TrainConfig,
    TrainingDiverged,
    grid_search,
    load_checkpoint,
    save_checkpoint,
    train,
)
from .rqn.training import GRID_KEYS, greedy_mean_lcc, write_training_log
from .vi import BeliefGrid, VIConfig, solve

log = logging.getLogger("impomdp")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_FAILURE = 3

_PREFIXED = {"vi_": VIConfig, "mcts_": MctsParams, "rqn_": TrainConfig, "sweep_": H.ExperimentConfig}


class RunFailed(RuntimeError):
    pass


@dataclasses.dataclass
class Settings:
    model: ModelParams
    vi: VIConfig
    mcts: MctsParams
    rqn: TrainConfig
    experiment: H.ExperimentConfig
    grid: dict[str, list]


def _known_keys() -> set[str]:
    keys = {f.name for f in dataclasses.fields(ModelParams)}
    for prefix, cls in _PREFIXED.items():
        keys |= {prefix + f.name for f in dataclasses.fields(cls)}
    return keys


def load_settings(path: str | None, sigma_e: float | None = None) -> Settings:
    raw = read_config(path) if path else parse_config("")
    known = _known_keys()
    unknown = sorted(k for k in raw if k not in known and not k.startswith("grid_"))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    grid = {}
    for key, value in raw.items():
        if key.startswith("grid_"):
            name = key[len("grid_"):]
            if name not in GRID_KEYS:
                raise ConfigError(f"{key!r} is not searchable; choose from {', '.join(GRID_KEYS)}")
            try:
                grid[name] = [int(v) if name == "lr_step" else float(v) for v in value.replace(";", ",").split(",") if v.strip()]
            except ValueError as exc:
                raise ConfigError(f"bad value list for {key!r}: {value!r}") from exc
    model = dataclass_from_mapping(ModelParams, {k: v for k, v in raw.items() if k in {f.name for f in dataclasses.fields(ModelParams)}})
    if sigma_e is not None:
        try:
            model = model.replace(sigma_e=sigma_e)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
    return Settings(
        model=model,
        vi=VIConfig.from_mapping(raw),
        mcts=MctsParams.from_mapping(raw),
        rqn=TrainConfig.from_mapping(raw),
        experiment=H.ExperimentConfig.from_mapping(raw),
        grid=grid,
    )


def _jsonable(obj):
    if dataclasses.is_dataclass(obj):
        return {k: _jsonable(v) for k, v in dataclasses.asdict(obj).items()}
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if math.isfinite(v) else str(v)
    return obj


def write_summary(out: Path, command: str, method: str, params: dict, seed: int, metrics: dict) -> Path:
    path = out / "summary.json"
    doc = {"command": command, "method": method, "params": _jsonable(params), "seed": seed, "metrics": _jsonable(metrics)}
    path.write_text(json.dumps(doc, indent=2, sort_keys=False) + "\n", encoding="utf-8")
    return path


def _load_rqn(path: str | None) -> RQNPolicy:
    if not path:
        raise ConfigError("method rqn needs --checkpoint")
    try:
        net, _ = load_checkpoint(H.require_file(path, "checkpoint"))
    except CheckpointError as exc:
        raise ConfigError(str(exc)) from exc
    return RQNPolicy(net)


def make_policy(method: str, s: Settings, params: ModelParams, checkpoint: str | None = None):
    if method == "vi":
        return solve(params, BeliefGrid.for_params(params, s.vi.n_d, s.vi.n_k), k_interp=s.vi.k_interp).policy
    if method == "mcts":
        return MCTSPolicy(params, s.mcts)
    if method == "rqn":
        return _load_rqn(checkpoint)
    if method == "benchmark-a1":
        return H.benchmark_a1_policy()
    if method == "random":
        return H.random_policy()
    raise ConfigError(f"unknown method {method!r}")


# subcommands

def cmd_solve_vi(args, s: Settings, out: Path) -> dict:
    t0 = time.perf_counter()
    sol = solve(s.model, BeliefGrid.for_params(s.model, s.vi.n_d, s.vi.n_k), k_interp=s.vi.k_interp)
    metrics = {"predicted_lcc": sol.predicted_lcc(), "solve_seconds": time.perf_counter() - t0}
    sol.write_value_csv(out / "vi_values.csv")
    if args.n:
        r = H.evaluate(sol.policy, s.model, args.n, args.seed, method="vi")
        metrics.update(r.summary())
        H.write_action_statistics_csv(out / "action_statistics.csv", r)
    write_summary(out, "solve-vi", "vi", {"model": s.model, "vi": s.vi}, args.seed, metrics)
    return metrics


def cmd_train_rqn(args, s: Settings, out: Path) -> dict:
    t0 = time.perf_counter()
    try:
        res = train(s.model, s.rqn, np.random.default_rng(args.seed))
    except TrainingDiverged as exc:
        write_training_log(out / "training_log.csv", exc.history)
        raise RunFailed(str(exc)) from exc
    res.write_log(out / "training_log.csv")
    save_checkpoint(out / "rqn.ckpt", res.network, s.rqn.cost_scale)
    mean, se = greedy_mean_lcc(res.network, s.model, args.n or 1000, np.random.default_rng(args.seed + 1))
    metrics = {"epochs": res.epochs, "stop_reason": res.stop_reason, "train_seconds": time.perf_counter() - t0,
               "mean_lcc": mean, "standard_error": se, "n": args.n or 1000}
    write_summary(out, "train-rqn", "rqn", {"model": s.model, "rqn": s.rqn}, args.seed, metrics)
    return metrics


def cmd_grid_search(args, s: Settings, out: Path) -> dict:
    if not s.grid:
        raise ConfigError("grid-search needs at least one grid_<key> list in the config")
    try:
        res = grid_search(s.model, s.rqn, s.grid, np.random.default_rng(args.seed), n_eval=args.n or 1000)
    except TrainingDiverged as exc:
        raise RunFailed(str(exc)) from exc
    res.write_csv(out / "grid_search.csv")
    save_checkpoint(out / "rqn.ckpt", res.best_network, res.best.config.cost_scale)
    best = {k: getattr(res.best.config, k) for k in GRID_KEYS}
    metrics = {"best": best, "mean_lcc": res.best.mean_lcc, "standard_error": res.best.standard_error, "points": len(res.leaderboard)}
    write_summary(out, "grid-search", "rqn", {"model": s.model, "rqn": s.rqn, "grid": s.grid}, args.seed, metrics)
    return metrics


def cmd_plan_mcts(args, s: Settings, out: Path) -> dict:
    p = s.model
    t = args.t
    mu_d = args.mu_d if args.mu_d is not None else p.mu_d0 + t * p.mu_k0
    mu_k = args.mu_k if args.mu_k is not None else p.mu_k0
    try:
        action, q, tree = tree_search(BeliefMean(mu_d, mu_k, t), t, p, s.mcts, np.random.default_rng(args.seed),
                                      precompute_schedule(p), return_tree=True)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    with open(out / "root_q.csv", "w", newline="", encoding="utf-8") as fh:
        fh.write("action,q,visits\n")
        for a in range(len(q)):
            fh.write(f"{a},{float(q[a])!r},{int(tree.action_visits[0, a])}\n")
    metrics = {"t": t, "mu_d": mu_d, "mu_k": mu_k, "action": action, "n_nodes": tree.n_nodes}
    write_summary(out, "plan-mcts", "mcts", {"model": p, "mcts": s.mcts}, args.seed, metrics)
    return metrics


def cmd_evaluate(args, s: Settings, out: Path) -> dict:
    policy = make_policy(args.method, s, s.model, args.checkpoint)
    n = args.n or s.experiment.n_eval(args.method)
    r = H.evaluate(policy, s.model, n, args.seed, method=args.method, chunk_size=s.experiment.chunk_size, keep_records=True)
    if not math.isfinite(r.mean_lcc):
        raise RunFailed("non-finite mean LCC")
    H.write_lcc_csv(out / "lcc.csv", r.lcc)
    H.write_action_statistics_csv(out / "action_statistics.csv", r)
    write_summary(out, "evaluate", args.method, {"model": s.model, **_method_block(args.method, s)}, args.seed, r.summary())
    return r.summary()


def _method_block(method: str, s: Settings) -> dict:
    return {"vi": {"vi": s.vi}, "mcts": {"mcts": s.mcts}, "rqn": {"rqn": s.rqn}}.get(method, {})


def cmd_sweep(args, s: Settings, out: Path) -> dict:
    cfg = s.experiment
    if args.n:
        cfg = dataclasses.replace(cfg, n_eval_vi=args.n, n_eval_mcts=args.n, n_eval_rqn=args.n, n_eval_baseline=args.n)
    cfg = dataclasses.replace(cfg, seed=args.seed)

    def factory(method, p):
        ckpt = None
        if method == "rqn":
            if not args.checkpoint:
                raise LookupError("sweeping rqn needs --checkpoint with a {sigma_e} placeholder")
            ckpt = args.checkpoint.format(sigma_e=p.sigma_e)
            if not Path(ckpt).is_file():
                raise LookupError(f"missing checkpoint {ckpt}")
        return make_policy(method, s, p, ckpt)

    try:
        rows = H.sweep(cfg, s.model, factory)
    except LookupError as exc:
        raise ConfigError(str(exc)) from exc
    H.write_sweep_csv(out / "sweep.csv", rows)
    metrics = {"rows": len(rows), "covers_saturation": cfg.covers_saturation()}
    write_summary(out, "sweep", ",".join(cfg.methods), {"model": s.model, "experiment": cfg}, args.seed, metrics)
    return metrics


def cmd_snapshot(args, s: Settings, out: Path) -> dict:
    p = s.model
    if not 1 <= args.t <= p.t_end - 1:
        raise ConfigError(f"--t must lie in 1..{p.t_end - 1}")
    policy = make_policy(args.method, s, p, args.checkpoint)
    if args.method == "rqn":
        # beliefs can only be tracked for the network: export the visited cloud instead
        tr = H.belief_trajectories(policy, p, args.n or 500, args.seed)
        md, mk, act = tr.at(args.t)
        with open(out / "snapshot_cloud.csv", "w", newline="", encoding="utf-8") as fh:
            fh.write("trajectory,t,mu_d,mu_k,action\n")
            for j in range(len(md)):
                fh.write(f"{j},{args.t},{float(md[j])!r},{float(mk[j])!r},{int(act[j])}\n")
        metrics = {"t": args.t, "points": len(md), "mode": "tracked"}
    else:
        grid = BeliefGrid.for_params(p, s.vi.n_d, s.vi.n_k)
        snap = H.policy_grid_snapshot(policy, args.t, grid, np.random.default_rng(args.seed))
        H.write_grid_snapshot_csv(out / "snapshot.csv", args.t, grid, snap)
        counts = np.bincount(snap.ravel(), minlength=4)
        metrics = {"t": args.t, "cells": int(snap.size), "mode": "imposed", "action_counts": counts.tolist()}
    write_summary(out, "snapshot", args.method, {"model": p, **_method_block(args.method, s)}, args.seed, metrics)
    return metrics


def cmd_trajectories(args, s: Settings, out: Path) -> dict:
    policy = make_policy(args.method, s, s.model, args.checkpoint)
    tr = H.belief_trajectories(policy, s.model, args.n or 500, args.seed)
    tr.write_csv(out / "belief_trajectories.csv")
    mean, std, se = H.lcc_statistics(tr.lcc)
    metrics = {"n": tr.n, "mean_lcc": mean, "std_lcc": std, "standard_error": se}
    write_summary(out, "trajectories", args.method, {"model": s.model, **_method_block(args.method, s)}, args.seed, metrics)
    return metrics


COMMANDS = {
    "solve-vi": (cmd_solve_vi, "solve the belief-grid value iteration"),
    "train-rqn": (cmd_train_rqn, "train the recurrent Q-network"),
    "grid-search": (cmd_grid_search, "grid search over RQN training settings"),
    "plan-mcts": (cmd_plan_mcts, "plan one decision with tree search"),
    "evaluate": (cmd_evaluate, "Monte Carlo evaluation of one method"),
    "sweep": (cmd_sweep, "evaluate methods over a range of noise levels"),
    "snapshot": (cmd_snapshot, "actions over the belief grid at one timestep"),
    "trajectories": (cmd_trajectories, "tracked belief trajectories"),
}

_WITH_METHOD = ("evaluate", "snapshot", "trajectories")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="impomdp", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        sp = sub.add_parser(name, help=help_text)
        sp.add_argument("--config", help="key = value config file")
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--out", default=".", help="output directory (created if missing)")
        sp.add_argument("--sigma-e", type=float, dest="sigma_e", help="override the measurement noise")
        sp.add_argument("-n", "--n", type=int, default=0, help="number of simulated life cycles")
        sp.add_argument("-v", "--verbose", action="store_true")
        if name in _WITH_METHOD:
            sp.add_argument("--method", choices=H.METHODS, required=True)
        if name in _WITH_METHOD or name == "sweep":
            sp.add_argument("--checkpoint", help="RQN checkpoint (sweep: path with a {sigma_e} placeholder)")
        if name in ("snapshot", "plan-mcts"):
            sp.add_argument("--t", type=int, required=(name == "snapshot"), default=1)
        if name == "plan-mcts":
            sp.add_argument("--mu-d", type=float, dest="mu_d")
            sp.add_argument("--mu-k", type=float, dest="mu_k")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    if args.n < 0:
        print("error: --n must be nonnegative", file=sys.stderr)
        return EXIT_CONFIG
    out = Path(args.out)
    try:
        settings = load_settings(args.config, args.sigma_e)
        out.mkdir(parents=True, exist_ok=True)
        metrics = COMMANDS[args.command][0](args, settings, out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except RunFailed as exc:
        print(f"failed: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    print(json.dumps(_jsonable(metrics)))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
