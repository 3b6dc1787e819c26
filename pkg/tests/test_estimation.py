import numpy as np
import pytest

from recdemand import core
from recdemand.estimation import (DemandModel, EventBatch, FitDivergedError, TrainingConfig,
                                  batch_gradient, beta_pooling_penalty, check_gradient,
                                  finite_difference_check, fit, holdout_metrics, init_parameters,
                                  split_holdout)
from recdemand.params import ModelParameters
from recdemand.simulator import generate_ground_truth, simulate_panel
from recdemand.types import Catalog, InteractionLog, SlotLayout
from recdemand.utils import fit_r2

from conftest import random_params, small_world


def single_event_batch(choice=-1, page=(-1, -1, -1), history=()):
    H = np.full((1, 4), -1)
    H[0, : len(history)] = history
    return EventBatch(H, np.array([len(history)]), np.array([page]), np.array([choice]),
                      SlotLayout((1, 1, 1)), np.zeros(1, np.int64), np.zeros(1, np.int64))


def test_init_is_seeded_and_scaled():
    cat = Catalog.range(20, 4)
    a = init_parameters(cat, TrainingConfig(embedding_dim=4, seed=7))
    b = init_parameters(cat, TrainingConfig(embedding_dim=4, seed=7))
    assert a.array_equal(b)
    zero = init_parameters(cat, TrainingConfig(embedding_dim=4, init_scale=0.0))
    assert zero.sqnorm() == 0.0


def test_init_entries_are_centered():
    cat = Catalog.range(5000, 20)
    config = TrainingConfig(embedding_dim=20, init_scale=0.3, seed=1)
    B = init_parameters(cat, config).B.ravel()
    assert B.size == 10 ** 5
    assert abs(B.mean()) < 3 * 0.3 / np.sqrt(B.size)


def test_zero_model_outside_choice_gradient():
    params = ModelParameters.zeros(3, 2, max_len=4, hidden=3)
    params.default_state[:] = [0.5, -1.5]
    batch = single_event_batch()
    _, grad = batch_gradient(batch, params)
    p = 1.0 / 4.0
    expected = -p * np.tile(params.default_state, (3, 1))
    np.testing.assert_allclose(grad.B, expected, atol=1e-15)
    assert check_gradient(lambda q: batch_gradient(batch, q), params, n_coords=None) < 1e-4


def test_duplicated_event_doubles_gradient():
    params = random_params(n_goods=5, dim=3, max_len=4, seed=3)
    one = single_event_batch(choice=2, page=(1, 2, 4), history=(0, 3))
    two = one.take(np.array([0, 0]))
    v1, g1 = batch_gradient(one, params)
    v2, g2 = batch_gradient(two, params)
    assert v2 == pytest.approx(2 * v1, rel=1e-14)
    np.testing.assert_allclose(g2.ravel(), 2 * g1.ravel(), rtol=1e-13, atol=1e-15)


def test_beta_gradient_is_sparse():
    params = random_params(n_goods=5, dim=3, max_len=4, seed=4)
    batch = single_event_batch(choice=1, page=(0, 1, -1), history=(2,))
    _, grad = batch_gradient(batch, params)
    touched = np.zeros_like(params.beta, dtype=bool)
    touched[0, 0] = touched[1, 1] = True
    assert np.all(grad.beta[~touched] == 0.0)
    assert np.all(grad.beta[touched] != 0.0)


def test_random_small_model_gradient():
    params = random_params(n_goods=5, dim=3, max_len=4, seed=5)
    rng = np.random.default_rng(5)
    n = 6
    H = np.full((n, 4), -1)
    lengths = rng.integers(0, 5, size=n)
    for i, k in enumerate(lengths):
        H[i, :k] = rng.choice(5, size=k, replace=False)
    pages = np.array([rng.choice(5, size=3, replace=False) for _ in range(n)])
    batch = EventBatch(H, lengths, pages, rng.integers(-1, 5, size=n), SlotLayout((1, 1, 1)),
                       np.arange(n), np.zeros(n, np.int64))
    assert finite_difference_check(params, batch, l2=0.01, n_coords=None) < 1e-4


def test_l2_only_gradient_is_exact():
    params = random_params(seed=6)
    empty = single_event_batch().take(np.zeros(0, dtype=np.int64))
    value, grad = batch_gradient(empty, params, l2=0.3)
    assert value == pytest.approx(-0.3 * params.sqnorm(), rel=1e-12)
    np.testing.assert_allclose(grad.ravel(), -0.6 * params.ravel(), rtol=1e-10)


def test_finite_difference_error_is_second_order():
    params = random_params(n_goods=4, dim=2, max_len=4, seed=8)
    batch = single_event_batch(choice=0, page=(0, 1, 2), history=(3, 1))
    _, grad = batch_gradient(batch, params)
    k = 0  # B[0, 0]
    theta = params.ravel()

    def fd(h):
        up, down = theta.copy(), theta.copy()
        up[k] += h
        down[k] -= h
        return (batch_gradient(batch, params.with_vector(up))[0]
                - batch_gradient(batch, params.with_vector(down))[0]) / (2 * h)

    e1 = abs(fd(0.02) - grad.ravel()[k])
    e2 = abs(fd(0.01) - grad.ravel()[k])
    assert 3.0 < e1 / e2 < 5.0


def test_beta_pooling_penalty_gradient():
    beta = np.random.default_rng(0).normal(size=(6, 3))
    value, grad = beta_pooling_penalty(beta, 2.0)
    dev = beta - beta.mean(axis=0)
    assert value == pytest.approx(2.0 * np.sum(dev ** 2))
    eps = 1e-6
    bumped = beta.copy()
    bumped[2, 1] += eps
    assert (beta_pooling_penalty(bumped, 2.0)[0] - value) / eps == pytest.approx(grad[2, 1], rel=1e-4)


@pytest.fixture(scope="module")
def fitted_world():
    config = small_world(n_users=150, horizon=10)
    truth = generate_ground_truth(config)
    log = simulate_panel(truth, config)
    return config, truth, log


def train_config(config, **kw):
    base = dict(embedding_dim=config.dim, hidden=config.hidden, max_len=config.max_len,
                optimizer="adam", learning_rate=0.01, epochs=2, batch_size=64)
    base.update(kw)
    return TrainingConfig(**base)


def test_zero_learning_rate_leaves_parameters(fitted_world):
    config, truth, log = fitted_world
    params, _ = fit(log, train_config(config, learning_rate=0.0), init=truth)
    assert params.array_equal(truth)


def test_fit_is_deterministic(fitted_world):
    config, _, log = fitted_world
    _, r1 = fit(log, train_config(config, seed=4))
    _, r2 = fit(log, train_config(config, seed=4))
    assert r1.train_losses == r2.train_losses
    assert r1.holdout_loss == r2.holdout_loss


def test_truth_init_stays_near_truth_loss():
    config = small_world(n_users=1000, horizon=10)
    truth = generate_ground_truth(config)
    log = simulate_panel(truth, config)
    _, hold = split_holdout(log)
    truth_loss = holdout_metrics(truth, log, events=hold)["log_loss"]
    _, report = fit(log, train_config(config, epochs=1, learning_rate=0.001), init=truth)
    assert report.holdout_loss <= truth_loss * 1.01


def test_report_matches_holdout_metrics(fitted_world):
    config, _, log = fitted_world
    params, report = fit(log, train_config(config))
    _, hold = split_holdout(log)
    assert holdout_metrics(params, log, events=hold)["log_loss"] == pytest.approx(
        report.holdout_loss, rel=1e-12)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_nonfinite_parameters_raise(fitted_world):
    config, truth, log = fitted_world
    bad = truth.copy()
    bad.B[0, 0] = np.nan
    with pytest.raises(ValueError):
        fit(log, train_config(config), init=bad)
    huge = truth.copy()
    huge.B[:] = 1e300
    with pytest.raises(FloatingPointError):
        fit(log, train_config(config, epochs=1), init=huge)
    assert issubclass(FitDivergedError, FloatingPointError)


def test_truth_share_fit_on_large_panel():
    config = small_world(n_users=2000, horizon=50, n_goods=30)
    truth = generate_ground_truth(config)
    log = simulate_panel(truth, config)
    assert log.n_events == 10 ** 5
    metrics = holdout_metrics(truth, log)
    assert metrics["share_r2"] > 0.9
    probs = core.event_probabilities(log, truth)
    np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-12)


def test_constant_model_has_no_share_fit(fitted_world):
    config, truth, log = fitted_world
    flat = ModelParameters.zeros(truth.n_goods, truth.dim, max_len=truth.max_len)
    metrics = holdout_metrics(flat, log)
    implied = metrics["implied_share"][:-1]
    np.testing.assert_allclose(implied, implied[0], rtol=1e-12)
    assert metrics["share_r2"] <= 1e-9
    assert metrics["implied_share"].sum() == pytest.approx(1.0, abs=1e-12)


def test_estimator_wrapper(fitted_world):
    config, _, log = fitted_world
    model = DemandModel(embedding_dim=config.dim, hidden=config.hidden, max_len=config.max_len,
                        epochs=1, batch_size=64).fit(log)
    probs = model.predict_proba(log)
    assert probs.shape == (log.n_events, log.n_goods + 1)
    assert np.isfinite(model.score(log))
