import numpy as np
import pytest

from recdemand.params import ModelParameters
from recdemand.policies import OraclePolicy, PageContext
from recdemand.simulator import (CONTROL, ExperimentArm, WorldConfig, assign_arms, default_policy,
                                 generate_ground_truth, oracle_recommender, run_salience_experiment,
                                 run_users, simulate_panel)
from recdemand.types import SlotLayout

from conftest import small_world


def test_truth_is_seeded_and_slot_ordered():
    config = small_world()
    a = generate_ground_truth(config)
    b = generate_ground_truth(config)
    assert a.array_equal(b)
    assert np.all(a.beta[:, 0] > a.beta[:, 1])
    assert np.all(a.beta[:, 1] > a.beta[:, 2])


def test_default_skew_concentrates_plays():
    config = WorldConfig(n_users=500)
    log = simulate_panel(generate_ground_truth(config), config)
    shares = np.sort(log.choice_shares()[:-1])[::-1]
    top = shares[: config.n_goods // 10].sum()
    assert top / shares.sum() > 0.5


def oracle_context(params, n, layout, watched=None, seed=0):
    d = params.dim
    states = np.tile(params.default_state, (n, 1))
    watched = np.zeros((n, params.n_goods), bool) if watched is None else watched
    uniforms = np.random.default_rng(seed).random((n, layout.total))
    return PageContext(params, states, np.full((n, 1), -1), np.zeros(n, np.int64), watched,
                       uniforms, layout, np.arange(n), 0)


def test_pure_exploration_is_uniform():
    params = ModelParameters.zeros(6, 2, n_slots=1)
    params.default_state[:] = [1.0, 0.0]
    params.B[:, 0] = np.arange(6)
    layout = SlotLayout((2,))
    watched = np.zeros((40000, 6), bool)
    watched[:, 5] = True
    pages = OraclePolicy(params, 1.0).pages(oracle_context(params, 40000, layout, watched))
    counts = np.bincount(pages.ravel(), minlength=6)
    assert counts[5] == 0
    p = 2 / 5
    se = np.sqrt(p * (1 - p) / 40000)
    np.testing.assert_allclose(counts[:5] / 40000, p, atol=4 * se)


def test_no_exploration_picks_argmax():
    params = ModelParameters.zeros(3, 2, n_slots=1)
    params.B[:, 0] = [0.2, 1.5, -0.3]
    config = WorldConfig(n_goods=3, capacities=(1,), beta_levels=(1.0,), exploration_rate=0.0,
                         dim=2, hidden=2, ranking_noise=0.0)
    for seed in range(5):
        page = oracle_recommender(np.array([1.0, 0.0]), params, config, rng=seed)
        assert page.goods() == [1]


def test_inclusion_is_monotone_in_utility():
    params = ModelParameters.zeros(8, 2, n_slots=1)
    params.default_state[:] = [1.0, 0.0]
    params.B[:, 0] = np.linspace(-1, 1, 8)
    layout = SlotLayout((3,))
    pages = OraclePolicy(params, 0.5).pages(oracle_context(params, 10 ** 5, layout, seed=2))
    freq = np.bincount(pages.ravel(), minlength=8) / 10 ** 5
    se = np.sqrt(2 * freq * (1 - freq) / 10 ** 5)
    assert np.all(np.diff(freq) >= -3 * se[1:])
    assert freq[-1] > freq[0]


def test_zero_truth_engagement():
    config = small_world(n_users=400, horizon=5)
    truth = generate_ground_truth(config).map(np.zeros_like)
    log = simulate_panel(truth, config)
    J = config.n_goods
    p = J / (J + 1)
    engagement = np.mean(log.choices >= 0)
    assert abs(engagement - p) < 4 * np.sqrt(p * (1 - p) / log.n_events)


def test_zero_horizon_gives_empty_log():
    config = small_world(horizon=0)
    log = simulate_panel(generate_ground_truth(config), config)
    assert log.n_events == 0


def test_event_count_is_users_times_horizon(world):
    config, _, log = world
    assert log.n_events == config.n_users * config.horizon


@pytest.mark.slow
def test_shares_converge_to_model_shares():
    config = small_world(n_users=20000, n_goods=20, horizon=50)
    truth = generate_ground_truth(config)
    users = np.arange(config.n_users)
    log, prob_sum = run_users(truth, config.layout, users, users, config.horizon,
                              default_policy(truth, config), config.seed, return_expected=True)
    n = log.n_events
    assert n == 10 ** 6
    p = prob_sum / n
    # sum_e p_e(1 - p_e) <= n pbar (1 - pbar)
    se = np.sqrt(p * (1 - p) / n)
    assert np.all(np.abs(log.choice_shares() - p) < 3 * se)


def salience_world():
    config = small_world(n_users=600, horizon=6)
    truth = generate_ground_truth(config)
    return config, truth


def test_unit_boost_reproduces_control():
    config, truth = salience_world()
    arms = [ExperimentArm("flat", (0,), 1.0, 0.5)]
    logs = run_salience_experiment(truth, config, arms)
    a, c = logs["flat"], logs[CONTROL]
    assert a.n_events == c.n_events
    np.testing.assert_array_equal(a.choices, c.choices)
    np.testing.assert_array_equal(a.pages, c.pages)
    assert set(a.users.tolist()).isdisjoint(c.users.tolist())


def test_boost_raises_focal_rate_and_conserves_slots():
    config, truth = salience_world()
    arm = ExperimentArm("boost", (1,), 5.0, 0.5)
    logs = run_salience_experiment(truth, config, [arm])
    focal = arm.focal_goods(config.category_labels())
    rate = {k: v.recommendation_rates()[focal].sum() for k, v in logs.items()}
    assert rate["boost"] > rate[CONTROL]
    for log in logs.values():
        assert np.all((log.pages >= 0).sum(axis=1) == config.layout.total)


def test_arm_assignment():
    arms = [ExperimentArm("a", (0,), 2.0, 0.25), ExperimentArm("b", (1,), 2.0, 0.25)]
    groups = assign_arms(100, arms, np.random.default_rng(0))
    assert sorted(len(g) for g in groups.values()) == [25, 25, 50]
    assert np.array_equal(np.sort(np.concatenate(list(groups.values()))), np.arange(100))
    with pytest.raises(ValueError):
        assign_arms(10, [ExperimentArm("a", (0,), 2.0, 0.7), ExperimentArm("b", (0,), 2.0, 0.7)], 0)
    with pytest.raises(ValueError):
        ExperimentArm(CONTROL, (0,), 2.0, 0.1)
