import math

import numpy as np
import pytest

from impomdp.env import ModelParams, simulate_batch
from impomdp.rqn import (
    Adam,
    CheckpointError,
    NetworkShape,
    RQNetwork,
    RQNPolicy,
    TrainConfig,
    TrainingDiverged,
    collect_batch,
    dueling_combine,
    epsilon_at,
    grid_search,
    lcc_mse,
    load_checkpoint,
    lr_at,
    one_hot,
    param_count_formula,
    save_checkpoint,
    train,
    train_epoch,
)
from impomdp.rqn import training as train_mod
from oracles import finite_difference_errors as _relative_errors

P = ModelParams()
LAYER_TYPES = ["fc1_obs", "fc1_act", "fc2_obs", "fc2_act", "lstm.w_ih", "lstm.w_hh", "lstm.b_ih", "lstm.b_hh", "fc3", "value", "advantage"]


def _net(seed=0, shape=NetworkShape()):
    return RQNetwork.initialise(np.random.default_rng(seed), shape, obs_center=-70.0, obs_scale=60.0)


def test_default_parameter_count():
    assert _net().param_count() == 57195
    assert param_count_formula() == 57195


def test_parameter_count_other_hidden_size():
    shape = NetworkShape(hidden=81)
    net = _net(shape=shape)
    assert net.param_count() == param_count_formula(shape)
    # LSTM grows by 4*(50 + 2*81 + 1 + 2) - ... ; FC3 by 160: compare against the default
    delta = 4 * ((50 + 81) * 81 + 2 * 81) - 4 * ((50 + 80) * 80 + 2 * 80) + 160
    assert net.param_count() - 57195 == delta


def test_zero_heads_give_zero_q():
    net = _net()
    for name in ("value.w", "value.b", "advantage.w", "advantage.b"):
        net.params[name][...] = 0.0
    q = net.forward(np.array([[-100.0, -50.0]]), np.array([[0, 2]])).q
    assert np.all(q == 0.0)


def test_dueling_arithmetic():
    np.testing.assert_array_equal(dueling_combine(10.0, [2, 2, 2, 2]), [10, 10, 10, 10])
    np.testing.assert_array_equal(dueling_combine(0.0, [0, 4, 8, 12]), [-6, -2, 2, 6])


def test_dueling_identity_random():
    rng = np.random.default_rng(1)
    for seed in range(5):
        out = _net(seed).forward(rng.normal(-60, 80, (200, 3)), rng.integers(0, 4, (200, 3)))
        assert np.max(np.abs((out.q - out.value[..., None]).mean(axis=-1))) < 1e-12


def test_one_hot():
    oh = one_hot(np.array([[0, 3], [2, 1]]))
    assert oh.shape == (2, 2, 4)
    assert np.all(oh.sum(axis=-1) == 1) and np.all((oh == 0) | (oh == 1))
    assert oh[0, 1, 3] == 1 and oh[1, 0, 2] == 1


def test_forward_rejects_nonfinite():
    with pytest.raises(ValueError):
        _net().forward(np.array([[np.nan]]), np.array([[0]]))


def test_stepwise_matches_sequence():
    net = _net(3)
    rng = np.random.default_rng(3)
    obs = rng.normal(-80, 40, (4, 6))
    acts = rng.integers(0, 4, (4, 6))
    full = net.forward(obs, acts).q
    state = net.initial_state(4)
    for t in range(6):
        step = net.forward(obs[:, t:t + 1], acts[:, t:t + 1], state)
        state = step.state
        np.testing.assert_allclose(step.q[:, 0], full[:, t], rtol=0, atol=1e-13)


def _gradient_check_setup(seed=0):
    p = P.replace(sigma_e=20.0)
    net = _net(seed)
    target = _net(seed + 100)
    batch = collect_batch(net, 0.5, p, 8, np.random.default_rng(seed))
    return p, net, target, batch


def test_bptt_gradients_match_finite_differences():
    p, net, target, batch = _gradient_check_setup()
    errs = _relative_errors(net, target, batch, p.gamma, 1e-3, LAYER_TYPES, 20, np.random.default_rng(7))
    assert set(errs) == set(LAYER_TYPES)
    assert max(errs.values()) <= 1e-4, errs


def test_cost_shift_keeps_loss_finite():
    p, net, target, batch = _gradient_check_setup(1)
    batch.action_costs[:, 1:p.t_end] += 7.0
    terms = lcc_mse(net, target, batch, p.gamma, 0.0)
    assert math.isfinite(terms.total)
    out = net.forward(batch.observations, batch.actions[:, :-1])
    assert np.max(np.abs((out.q - out.value[..., None]).mean(axis=-1))) < 1e-12


def test_zero_discount_zero_costs_loss():
    p = P.replace(gamma=1e-300, cost_a=(0, 0, 0, 0), cost_f=0.0)
    net = _net(2)
    batch = collect_batch(net, 1.0, p, 16, np.random.default_rng(2))
    terms = lcc_mse(net, net.copy(), batch, 0.0, 0.0)
    out = net.forward(batch.observations, batch.actions[:, :-1]).q
    sel = np.take_along_axis(out, batch.actions[:, 1:, None].astype(int), axis=-1)[..., 0]
    assert terms.mse == pytest.approx(np.sum(sel**2) / 16, rel=1e-12)


def test_collect_uniform_when_epsilon_one():
    batch = collect_batch(_net(), 1.0, P, 2000, np.random.default_rng(4))
    acts = batch.actions[:, 1:].ravel()
    n = len(acts)
    freq = np.bincount(acts, minlength=4) / n
    assert np.all(np.abs(freq - 0.25) < 3 * math.sqrt(0.25 * 0.75 / n))
    assert np.all(batch.actions[:, 0] == 0)


def test_collect_deterministic_when_greedy():
    a = collect_batch(_net(), 0.0, P, 50, np.random.default_rng(6))
    b = collect_batch(_net(), 0.0, P, 50, np.random.default_rng(6))
    np.testing.assert_array_equal(a.actions, b.actions)


def test_collected_cost_of_repair_step():
    batch = collect_batch(_net(), 1.0, P, 300, np.random.default_rng(9))
    t_idx = np.nonzero((batch.actions[:, 1:] == 2) & (batch.failure_costs[:, 1:P.t_end] == 0))
    assert len(t_idx[0]) > 0
    np.testing.assert_array_equal(batch.costs[:, 1:P.t_end][t_idx], 5.0)


def test_epsilon_sequence():
    cfg = TrainConfig(epsilon_max=0.3, epsilon_decay_every=1)
    assert [epsilon_at(e, cfg) for e in range(6)] == [0.3, 0.2, 0.1, 0.0, 0.0, 0.0]


def test_epsilon_default_cadence():
    cfg = TrainConfig(epsilon_max=0.3, max_epochs=500)
    assert cfg.decay_every() == 17
    assert epsilon_at(16, cfg) == 0.3 and epsilon_at(17, cfg) == 0.2 and epsilon_at(51, cfg) == 0.0


def test_lr_step_schedule():
    cfg = TrainConfig(lr=1e-3, lr_step=10, lr_factor=0.5)
    assert lr_at(9, cfg) == 1e-3 and lr_at(10, cfg) == 5e-4 and lr_at(25, cfg) == 2.5e-4


def test_adam_amsgrad_matches_reference_step():
    p = {"w": np.array([1.0, -2.0])}
    opt = Adam(p, lr=0.1)
    opt.step(p, {"w": np.array([0.5, -1.0])})
    # first step moves each coordinate by lr * sign(g) (up to eps)
    np.testing.assert_allclose(p["w"], [0.9, -1.9], atol=1e-7)
    after_first = p["w"].copy()
    opt.step(p, {"w": np.array([-0.1, 0.0])})
    m = 0.9 * np.array([0.05, -0.1]) + 0.1 * np.array([-0.1, 0.0])
    v = 0.999 * np.array([0.00025, 0.001]) + 0.001 * np.array([0.01, 0.0])
    vmax = np.maximum(v, [0.00025, 0.001])
    step = 0.1 / (1 - 0.9**2) * m / (np.sqrt(vmax) / math.sqrt(1 - 0.999**2) + 1e-8)
    np.testing.assert_allclose(p["w"], after_first - step, rtol=1e-12)


def test_weight_decay_dominance_shrinks_norm():
    p = P
    net = _net(5)
    target = net.copy()
    cfg = TrainConfig(weight_decay=1e6, batch_size=16)
    opt = Adam(net.params, cfg.lr)
    norms = [net.squared_norm()]
    for i in range(4):
        batch = collect_batch(net, 0.3, p, 16, np.random.default_rng(i))
        train_epoch(net, target, batch, cfg, opt, p.gamma)
        norms.append(net.squared_norm())
    assert all(b < a for a, b in zip(norms, norms[1:]))


def test_zero_epochs_returns_initial_network():
    init = train_mod.new_network(P, TrainConfig(), np.random.default_rng(0).spawn(3)[0])
    res = train(P, TrainConfig(max_epochs=0), np.random.default_rng(0))
    assert res.epochs == 0
    for k in init.params:
        np.testing.assert_array_equal(res.network.params[k], init.params[k])


def test_target_network_is_frozen_between_clones(monkeypatch):
    seen = []
    real = train_mod.lcc_mse

    def spy(network, target, batch, gamma, wd, scale=1.0):
        seen.append(target.forward(np.array([[-50.0, -20.0]]), np.array([[0, 1]])).q.copy())
        return real(network, target, batch, gamma, wd, scale)

    monkeypatch.setattr(train_mod, "lcc_mse", spy)
    train(P, TrainConfig(max_epochs=7, batch_size=8, target_update_period=3, patience=100), np.random.default_rng(1))
    for block in ([0, 1, 2], [3, 4, 5]):
        for e in block[1:]:
            np.testing.assert_array_equal(seen[e], seen[block[0]])
    assert not np.array_equal(seen[3], seen[0])


def test_divergence_raises(monkeypatch):
    monkeypatch.setattr(train_mod, "train_epoch", lambda *a, **k: float("nan"))
    with pytest.raises(TrainingDiverged) as info:
        train(P, TrainConfig(max_epochs=10, batch_size=4), np.random.default_rng(0))
    assert len(info.value.history) == 3


def test_early_stopping(monkeypatch):
    costs = iter([5.0, 4.0] + [6.0] * 100)
    monkeypatch.setattr(train_mod, "train_epoch", lambda *a, **k: next(costs))
    res = train(P, TrainConfig(max_epochs=100, batch_size=4, patience=5, epsilon_max=0.0), np.random.default_rng(0))
    assert res.stop_reason == "early_stopping" and res.epochs == 7


def test_early_stopping_waits_for_greedy_phase(monkeypatch):
    # exploring epochs have the lowest cost but must not anchor the patience window
    costs = iter([0.1] * 3 + [5.0, 4.0] + [6.0] * 100)
    monkeypatch.setattr(train_mod, "train_epoch", lambda *a, **k: next(costs))
    cfg = TrainConfig(max_epochs=100, batch_size=4, patience=5, epsilon_max=0.3, epsilon_decay_every=1)
    res = train(P, cfg, np.random.default_rng(0))
    assert [r.epsilon for r in res.history[:4]] == [0.3, 0.2, 0.1, 0.0]
    assert res.stop_reason == "early_stopping" and res.epochs == 3 + 7


def test_trivial_environment_learns_constant():
    p = P.replace(cost_f=0.0, cost_a=(2.0, 2.0, 2.0, 2.0))
    cfg = TrainConfig(max_epochs=30, batch_size=64, patience=100)
    res = train(p, cfg, np.random.default_rng(3))
    lcc = simulate_batch(RQNPolicy(res.network), p, 500, np.random.default_rng(4)).discounted_lcc
    expected = 2.0 * sum(p.gamma**t for t in range(1, p.t_end))
    np.testing.assert_allclose(lcc, expected, rtol=1e-12)


def test_policy_determinism_and_order():
    net = _net(8)
    obs = np.random.default_rng(0).normal(-90, 30, (3, 5))
    runs = []
    for _ in range(2):
        pol = RQNPolicy(net)
        pol.reset(3, np.random.default_rng(0))
        prev = np.zeros(3, dtype=int)
        seq = []
        for t in range(1, 6):
            prev = pol.act(t, obs[:, t - 1], prev)
            seq.append(prev)
        runs.append(np.array(seq))
    np.testing.assert_array_equal(runs[0], runs[1])
    pol = RQNPolicy(net)
    with pytest.raises(RuntimeError):
        pol.act(1, obs[:, 0], np.zeros(3, dtype=int))
    pol.reset(3, np.random.default_rng(0))
    with pytest.raises(RuntimeError):
        pol.act(2, obs[:, 0], np.zeros(3, dtype=int))


def test_checkpoint_roundtrip(tmp_path):
    net = _net(4)
    save_checkpoint(tmp_path / "net.txt", net, cost_scale=100.0)
    back, scale = load_checkpoint(tmp_path / "net.txt")
    assert scale == 100.0 and back.obs_center == net.obs_center and back.obs_scale == net.obs_scale
    for k in net.params:
        np.testing.assert_array_equal(back.params[k], net.params[k])
    head = (tmp_path / "net.txt").read_text(encoding="utf-8").splitlines()
    assert head[0] == "impomdp-rqn 1" and head[6] == "fc1_obs.w 2 1 20"


def test_checkpoint_rejects_garbage(tmp_path):
    f = tmp_path / "bad.txt"
    f.write_text("hello\n", encoding="utf-8")
    with pytest.raises(CheckpointError):
        load_checkpoint(f)
    net = _net()
    save_checkpoint(f, net)
    lines = f.read_text(encoding="utf-8").splitlines()
    lines[7] = " ".join(lines[7].split()[:-1])
    f.write_text("\n".join(lines), encoding="utf-8")
    with pytest.raises(CheckpointError):
        load_checkpoint(f)


def test_training_log_roundtrip(tmp_path):
    res = train(P, TrainConfig(max_epochs=3, batch_size=8, eval_every=2, eval_n=10), np.random.default_rng(0))
    res.write_log(tmp_path / "log.csv")
    back = train_mod.read_training_log(tmp_path / "log.csv")
    assert len(back) == 3
    for a, b in zip(res.history, back):
        assert a.epoch == b.epoch and a.cost == b.cost and a.epsilon == b.epsilon and a.lr == b.lr
        assert a.batch_mean_lcc == b.batch_mean_lcc
        assert (math.isnan(a.eval_mean_lcc) and math.isnan(b.eval_mean_lcc)) or a.eval_mean_lcc == b.eval_mean_lcc
    assert math.isfinite(back[1].eval_mean_lcc)


def test_grid_search_leaderboard():
    base = TrainConfig(max_epochs=2, batch_size=8)
    space = {"weight_decay": [0.0, 1e-4], "epsilon_max": [0.1, 0.3]}
    res = grid_search(P, base, space, np.random.default_rng(0), n_eval=50)
    assert len(res.leaderboard) == 4
    assert all(res.best.mean_lcc <= e.mean_lcc for e in res.leaderboard)
    with pytest.raises(ValueError):
        grid_search(P, base, {}, np.random.default_rng(0))
    with pytest.raises(ValueError):
        grid_search(P, base, {"batch_size": [1]}, np.random.default_rng(0))


def test_single_point_grid_equals_train():
    base = TrainConfig(max_epochs=2, batch_size=8)
    rng = np.random.default_rng(5)
    res = grid_search(P, base, {"weight_decay": [0.0]}, rng, n_eval=20)
    train_seed = int(np.random.default_rng(5).integers(0, 2**63 - 1, size=2)[0])
    direct = train(P, base, np.random.default_rng(train_seed))
    for k in direct.network.params:
        np.testing.assert_array_equal(res.best_network.params[k], direct.network.params[k])
