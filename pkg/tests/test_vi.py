import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from impomdp import vi
from impomdp.belief import BeliefMean, posterior_mean_arrays, precompute_schedule, prior_mean_arrays
from impomdp.env import ConstantPolicy, ModelParams, simulate_batch

from oracles import dense_transition_matrix, enumerate_values

P = ModelParams()


@pytest.fixture(scope="module")
def default_solution():
    return vi.solve(P)


def test_grid_defaults():
    g = vi.BeliefGrid.for_params(P)
    assert (g.n_d, g.n_k) == (60, 20)
    assert g.bounds_d == (-159.36, 26.67)
    assert g.bounds_k == pytest.approx((-0.6, 9.4))
    assert g.mid_d[0] == pytest.approx(-159.36 + 0.5 * (26.67 + 159.36) / 60)


def test_grid_rejects_degenerate():
    with pytest.raises(ValueError):
        vi.BeliefGrid(bounds_d=(1.0, 1.0))
    with pytest.raises(ValueError):
        vi.BeliefGrid(n_d=0)


def test_grid_clamps_out_of_range():
    g = vi.BeliefGrid.for_params(P)
    assert g.cell_index(-1e6, -1e6) == 0
    assert g.cell_index(1e6, 1e6) == g.n_cells - 1
    i, j = g.split(g.cell_index(g.mid_d[7], g.mid_k[3]))
    assert (i, j) == (7, 3)


@pytest.mark.parametrize("sigma_e", [0.0, 0.5, 50.0, 5000.0])
def test_rows_sum_to_one(sigma_e):
    p = P.replace(sigma_e=sigma_e)
    tab = vi.build_transition_tables(vi.BeliefGrid.for_params(p), precompute_schedule(p), p)
    sums = tab.probs[1:].sum(axis=-1)
    assert np.max(np.abs(sums - 1)) < 1e-9
    assert abs(tab.initial_probs.sum() - 1) < 1e-9


def test_rows_sum_to_one_with_k_interpolation():
    tab = vi.build_transition_tables(vi.BeliefGrid.for_params(P), precompute_schedule(P), P, k_interp=True)
    assert np.max(np.abs(tab.probs[1:].sum(axis=-1) - 1)) < 1e-9


def test_quasi_uninformative_rows_are_deterministic():
    p = P.replace(sigma_e=1e9)
    g = vi.BeliefGrid.for_params(p)
    s = precompute_schedule(p)
    tab = vi.build_transition_tables(g, s, p)
    md, mk = g.cell_midpoints()
    for t in range(1, p.t_end + 1):
        for a in range(4):
            pd, pk = prior_mean_arrays(md, mk, a, p)
            target = g.cell_index(pd, pk)
            mass = np.where(tab.dest[t, a] == target[:, None], tab.probs[t, a], 0.0).sum(axis=1)
            assert mass.min() >= 0.999, (t, a)


def test_quasi_uninformative_rows_at_1e6():
    # at sigma_e = 1e6 the law still has std ~4e-4, so only sources whose
    # prior mean sits within a few std of a mu_D edge may split
    p = P.replace(sigma_e=1e6)
    g = vi.BeliefGrid.for_params(p)
    s = precompute_schedule(p)
    tab = vi.build_transition_tables(g, s, p)
    md, mk = g.cell_midpoints()
    inner = g.edges_d[1:-1]
    for t in (1, 10, 20):
        for a in range(4):
            pd, pk = prior_mean_arrays(md, mk, a, p)
            target = g.cell_index(pd, pk)
            mass = np.where(tab.dest[t, a] == target[:, None], tab.probs[t, a], 0.0).sum(axis=1)
            near_edge = np.min(np.abs(np.atleast_1d(pd)[:, None] - inner[None, :]), axis=1) < 5 * s.transition_std(t)
            assert mass[~near_edge].min() >= 0.999


def test_row_matches_mc_bucketing():
    p = P.replace(sigma_e=50.0)
    g = vi.BeliefGrid.for_params(p)
    s = precompute_schedule(p)
    tab = vi.build_transition_tables(g, s, p)
    src = (g.n_d // 2) * g.n_k + g.n_k // 2
    md, mk = g.cell_midpoints()
    n = 10**6
    rng = np.random.default_rng(2024)
    # true state at t=0 drawn from the belief centred on the cell midpoint
    d = md[src] + p.sigma_d0 * rng.standard_normal(n)
    k = mk[src] + p.sigma_k0 * rng.standard_normal(n)
    o = d + k + p.sigma_e * rng.standard_normal(n)
    pd, pk = prior_mean_arrays(md[src], mk[src], 0, p)
    nd, nk = posterior_mean_arrays(pd, pk, o, s, 1)
    freq = np.bincount(g.cell_index(nd, nk), minlength=g.n_cells) / n
    expected = np.zeros(g.n_cells)
    np.add.at(expected, tab.dest[1, 0, src], tab.probs[1, 0, src])
    se = np.sqrt(np.maximum(expected * (1 - expected), 1e-12) / n)
    assert np.all(np.abs(freq - expected) <= 3 * se + 1e-6)


def test_table_matches_loop_built_matrix():
    p = P.replace(sigma_e=20.0, t_end=4)
    g = vi.BeliefGrid(6, 4, vi.BeliefGrid.for_params(p).bounds_d, vi.BeliefGrid.for_params(p).bounds_k)
    s = precompute_schedule(p)
    tab = vi.build_transition_tables(g, s, p)
    for t in (1, 3):
        for a in range(4):
            np.testing.assert_allclose(tab.matrix(t, a), dense_transition_matrix(g, s, p, t, a), atol=1e-12)


def test_immediate_cost_at_threshold():
    s = precompute_schedule(P)
    assert vi.expected_immediate_cost(P.d_cr, 2, s, 5, P) == pytest.approx(5 + 0.5 * 150, abs=1e-12)


def test_immediate_cost_far_tail():
    s = precompute_schedule(P)
    assert s.sigma_d_post[3] <= 21
    c = vi.expected_immediate_cost(-150.0, 1, s, 3, P)
    assert abs(c - 1.0) < 1e-10


def test_immediate_cost_gaussian_tail():
    from impomdp.belief import CovarianceSchedule

    sched = CovarianceSchedule(0.0, *[np.full(3, 5.0)] * 4, np.zeros(3), np.zeros(3))
    assert vi.expected_immediate_cost(10.0, 0, sched, 1, P) == pytest.approx(146.5875, abs=1e-4)


def test_immediate_cost_by_cell_uses_midpoint():
    g = vi.BeliefGrid.for_params(P)
    s = precompute_schedule(P)
    c = g.cell_index(g.mid_d[40], g.mid_k[2])
    assert vi.expected_immediate_cost(c, 3, s, 2, P, g) == vi.expected_immediate_cost(g.mid_d[40], 3, s, 2, P)


def test_zero_failure_cost_gives_do_nothing(default_solution):
    p = P.replace(cost_f=0.0)
    sol = vi.solve(p)
    assert np.all(sol.tables.policy[p.t_end - 1] == 0)
    assert np.all(sol.tables.values[1:] == 0)


def test_values_nonnegative_and_terminal(default_solution):
    v = default_solution.tables.values
    assert np.all(v[1:] >= 0)
    md, _ = default_solution.grid.cell_midpoints()
    fail = P.cost_f * vi.failure_probability(md, default_solution.schedule.sigma_d_post[P.t_end], P.d_cr)
    np.testing.assert_array_equal(v[P.t_end], fail)


def test_policy_attains_minimum(default_solution):
    tb = default_solution.tables
    for t in range(1, P.t_end):
        q = tb.q[t]
        np.testing.assert_array_equal(q[np.arange(len(q)), tb.policy[t]], tb.values[t])
        # lowest index among exact ties
        for c in range(0, len(q), 97):
            assert tb.policy[t][c] == np.flatnonzero(q[c] == q[c].min())[0]


@pytest.mark.parametrize("sigma_e", [0.5, 50.0])
def test_backward_induction_equals_enumeration(sigma_e):
    p = P.replace(sigma_e=sigma_e, t_end=3, mu_d0=-30.0)
    full = vi.BeliefGrid.for_params(p)
    g = vi.BeliefGrid(6, 4, full.bounds_d, full.bounds_k)
    sol = vi.solve(p, g)
    ref = enumerate_values(g, sol.schedule, p)
    np.testing.assert_allclose(sol.tables.values[1], ref, rtol=0, atol=1e-10)


@settings(max_examples=8, deadline=None)
@given(st.floats(0.0, 20.0))
def test_constant_action_cost_shift(shift):
    p = P.replace(t_end=6, mu_d0=-60.0)
    g = vi.BeliefGrid.for_params(p, 12, 6)
    base = vi.solve(p, g)
    moved = vi.solve(p.replace(cost_a=tuple(c + shift for c in p.cost_a)), g)
    for t in range(1, p.t_end):
        steps = sum(p.gamma**i for i in range(p.t_end - t))
        np.testing.assert_allclose(moved.tables.values[t], base.tables.values[t] + shift * steps, rtol=1e-10, atol=1e-9)
        q0, q1 = base.tables.q[t], moved.tables.q[t]
        # argmin is unchanged wherever the minimum is not an exact-within-rounding tie
        gap = np.sort(q0, axis=1)[:, 1] - np.sort(q0, axis=1)[:, 0]
        clear = gap > 1e-8
        np.testing.assert_array_equal(base.tables.policy[t][clear], moved.tables.policy[t][clear])
        assert np.allclose(q1, q0 + shift * steps, atol=1e-9)


def test_value_nonincreasing_when_horizon_shrinks():
    g = vi.BeliefGrid.for_params(P, 30, 10)
    longer = vi.solve(P.replace(t_end=12), g)
    shorter = vi.solve(P.replace(t_end=11), g)
    for t in range(1, 11):
        assert np.all(shorter.tables.values[t] <= longer.tables.values[t] + 1e-9)


def test_policy_boundary_clamp(default_solution):
    pol = default_solution.policy
    tb = default_solution.tables
    assert pol.action_at(5, -1e4, -50.0) == tb.policy[5][0]
    assert pol.action_at(5, 1e4, 50.0) == tb.policy[5][-1]


def test_policy_safe_cell_last_decision(default_solution):
    assert default_solution.policy.action_at(P.t_end - 1, -150.0, 1.0) == 0


def test_policy_rejects_out_of_range_epoch(default_solution):
    pol = default_solution.policy
    b = BeliefMean(np.zeros(2), np.zeros(2), 0)
    with pytest.raises(ValueError):
        pol.act(0, np.zeros(2), np.zeros(2, int), b)
    with pytest.raises(ValueError):
        pol.act(P.t_end, np.zeros(2), np.zeros(2, int), b)


def test_self_consistency_sigma_50(default_solution):
    p = P.replace(sigma_e=50.0)
    sol = default_solution if P.sigma_e == 50.0 else vi.solve(p)
    batch = simulate_batch(sol.policy, p, 10**5, np.random.default_rng(1))
    mean = batch.discounted_lcc.mean()
    se = batch.discounted_lcc.std(ddof=1) / math.sqrt(len(batch))
    assert abs(sol.predicted_lcc() - mean) < 3 * se


def test_vi_beats_always_a1_at_low_noise():
    p = P.replace(sigma_e=0.5)
    sol = vi.solve(p)
    n = 20000
    v = simulate_batch(sol.policy, p, n, np.random.default_rng(3)).discounted_lcc
    b = simulate_batch(ConstantPolicy(1), p, n, np.random.default_rng(3)).discounted_lcc
    se = math.sqrt(v.var(ddof=1) / n + b.var(ddof=1) / n)
    assert v.mean() < b.mean() - 3 * se


@pytest.mark.slow
def test_grid_refinement_converges():
    p = P.replace(sigma_e=50.0)
    means = []
    for nd, nk in [(120, 40), (240, 80)]:
        sol = vi.solve(p, vi.BeliefGrid.for_params(p, nd, nk))
        lcc = simulate_batch(sol.policy, p, 10**5, np.random.default_rng(1)).discounted_lcc
        means.append((lcc.mean(), lcc.std(ddof=1) / math.sqrt(len(lcc))))
    assert abs(means[0][0] - means[1][0]) < means[1][1]


def test_csv_outputs(tmp_path, default_solution):
    default_solution.write_value_csv(tmp_path / "v.csv")
    default_solution.write_snapshot_csv(tmp_path / "s.csv", 19)
    lines = (tmp_path / "v.csv").read_text(encoding="utf-8").splitlines()
    assert lines[0] == "t,cell_d,cell_k,mu_d,mu_k,value,action"
    assert len(lines) == 1 + P.t_end * 1200
    snap = (tmp_path / "s.csv").read_text(encoding="utf-8").splitlines()
    assert len(snap) == 1201
    row = snap[1].split(",")
    assert int(row[5]) == default_solution.snapshot(19)[0, 0]
