import math

import numpy as np
import pytest

from recdemand import core
from recdemand.counterfactual import incrementality
from recdemand.estimation import EventBatch, TrainingConfig, batch_gradient, fit
from recdemand.exog import (ExogenousDemandModel, ExogenousEmbeddingTable, ExogenousWeights,
                            ProjectionWeights, exogenous_gradient, exogenous_gradient_check,
                            fit_exogenous, init_exogenous, project, split_goods_crossvalidation,
                            synthetic_raw_embeddings)
from recdemand.params import ModelParameters, random_like
from recdemand.simulator import generate_ground_truth, simulate_panel
from recdemand.types import SlotLayout
from recdemand.utils import fit_r2

from conftest import small_world


def random_projection(raw_dim=5, hidden=3, dim=2, seed=0):
    rng = np.random.default_rng(seed)
    return random_like(ProjectionWeights.zeros(raw_dim, hidden, dim), 0.7, rng)


def test_zero_weights_return_bias():
    proj = ProjectionWeights.zeros(6, 4, 3)
    proj.b2[:] = [0.5, -2.0, 1.0]
    raw = np.random.default_rng(0).normal(size=(5, 6))
    np.testing.assert_array_equal(project(raw, proj), np.tile(proj.b2, (5, 1)))


def test_projection_matches_scalar_oracle():
    proj = random_projection()
    x = np.random.default_rng(1).normal(size=5)
    hidden = [math.tanh(sum(x[i] * proj.W1[i, m] for i in range(5)) + proj.b1[m]) for m in range(3)]
    out = [sum(hidden[m] * proj.W2[m, k] for m in range(3)) + proj.b2[k] for k in range(2)]
    np.testing.assert_allclose(project(x, proj), out, rtol=0, atol=1e-12)
    with pytest.raises(ValueError):
        project(np.zeros(4), proj)


def tiny_batch(J=6, n=8, seed=0):
    rng = np.random.default_rng(seed)
    H = np.full((n, 4), -1)
    lengths = rng.integers(0, 5, size=n)
    for i, k in enumerate(lengths):
        H[i, :k] = rng.choice(J, size=k, replace=False)
    pages = np.array([rng.choice(J, size=3, replace=False) for _ in range(n)])
    return EventBatch(H, lengths, pages, rng.integers(-1, J, size=n), SlotLayout((1, 1, 1)),
                      np.arange(n), np.zeros(n, np.int64))


@pytest.mark.parametrize("activation", ["tanh", "identity"])
def test_exogenous_gradient(activation):
    J, D = 6, 5
    config = TrainingConfig(embedding_dim=3, hidden=4, max_len=4, init_scale=0.5, seed=2)
    weights = init_exogenous(J, D, config, proj_hidden=4)
    raw = np.random.default_rng(2).normal(size=(J, D))
    mask = np.array([True, True, False, True, False, True])
    err = exogenous_gradient_check(tiny_batch(J), weights, raw, mask, activation, n_coords=None)
    assert err < 1e-4


def test_identity_projection_reduces_to_fixed_embeddings():
    J, d = 6, 3
    config = TrainingConfig(embedding_dim=d, hidden=4, max_len=4, init_scale=0.5, seed=3)
    weights = init_exogenous(J, d, config, proj_hidden=d)
    weights.proj = ProjectionWeights.identity(d)
    raw = np.random.default_rng(3).normal(size=(J, d))
    mask = np.ones(J, dtype=bool)
    batch = tiny_batch(J, seed=3)
    value, grad = exogenous_gradient(batch, weights, raw, mask, "identity")
    params = core_params(weights, raw)
    base_value, base_grad = batch_gradient(batch, params)
    assert value == pytest.approx(base_value, rel=1e-14)
    np.testing.assert_allclose(grad.beta, base_grad.beta, rtol=1e-12, atol=1e-15)
    np.testing.assert_allclose(grad.seq.ravel(), base_grad.seq.ravel(), rtol=1e-12, atol=1e-15)


def core_params(weights: ExogenousWeights, raw):
    return ModelParameters(raw.copy(), weights.beta, weights.default_state, weights.seq)


@pytest.fixture(scope="module")
def exo_world():
    config = small_world(n_users=300, horizon=10)
    truth = generate_ground_truth(config)
    log = simulate_panel(truth, config)
    return config, truth, log


def exo_config(config, **kw):
    base = dict(embedding_dim=config.dim, hidden=config.hidden, max_len=config.max_len,
                optimizer="adam", learning_rate=0.02, epochs=4, batch_size=64)
    base.update(kw)
    return TrainingConfig(**base)


def test_frozen_identity_keeps_table(exo_world):
    config, truth, log = exo_world
    table = ExogenousEmbeddingTable(np.arange(truth.n_goods), truth.B)
    init = init_exogenous(truth.n_goods, config.dim, exo_config(config), proj_hidden=config.dim)
    init.proj = ProjectionWeights.identity(config.dim)
    params, proj, _ = fit_exogenous(log, table, exo_config(config, epochs=1), init=init,
                                    activation="identity", freeze_projection=True, normalize=False)
    np.testing.assert_array_equal(params.B, truth.B)
    np.testing.assert_array_equal(proj.W1, np.eye(config.dim))


def test_raw_table_is_untouched_and_fit_is_seeded(exo_world):
    config, truth, log = exo_world
    table = synthetic_raw_embeddings(truth.B, raw_dim=32, rng=0)
    before = table.vectors.copy()
    a = fit_exogenous(log, table, exo_config(config, epochs=1))
    b = fit_exogenous(log, table, exo_config(config, epochs=1))
    np.testing.assert_array_equal(table.vectors, before)
    assert a[0].array_equal(b[0])
    assert a[2].report.train_losses == b[2].report.train_losses


def test_missing_embedding_lists_goods(exo_world):
    config, truth, log = exo_world
    table = ExogenousEmbeddingTable(np.arange(truth.n_goods - 2), truth.B[:-2])
    with pytest.raises(KeyError, match="28, 29"):
        fit_exogenous(log, table, exo_config(config))


def test_table_validation():
    with pytest.raises(ValueError):
        ExogenousEmbeddingTable([0, 0], np.zeros((2, 3)))
    with pytest.raises(ValueError):
        ExogenousEmbeddingTable([0], np.full((1, 3), np.nan))
    with pytest.raises(ValueError):
        ExogenousEmbeddingTable([0, 1], np.zeros((3, 3)))


def test_linear_transform_of_truth_matches_baseline_fit(exo_world):
    config, truth, log = exo_world
    rng = np.random.default_rng(5)
    M = rng.normal(size=(config.dim, config.dim)) + 2 * np.eye(config.dim)
    table = ExogenousEmbeddingTable(np.arange(truth.n_goods), truth.B @ M)
    tc = exo_config(config, epochs=15)
    _, base = fit(log, tc)
    _, _, exo = fit_exogenous(log, table, tc, activation="identity")
    assert exo.report.holdout_loss <= 1.05 * base.holdout_loss


def test_split_zero_equals_full_fit(exo_world):
    config, truth, log = exo_world
    table = synthetic_raw_embeddings(truth.B, raw_dim=16, rng=1)
    tc = exo_config(config, epochs=1)
    cv = split_goods_crossvalidation(log, table, tc, rng=0, out_fraction=0.0)
    params, _, _ = fit_exogenous(log, table, tc)
    assert cv.out_of_sample is None
    assert cv.fit.parameters(table.catalog_matrix(truth.n_goods)).array_equal(params)
    observed = log.choice_shares()[:-1]
    implied = core.event_probabilities(log, params).mean(axis=0)[:-1]
    assert cv.in_sample.share_r2 == pytest.approx(fit_r2(observed, implied), abs=1e-12)


def test_split_is_seeded(exo_world):
    config, truth, log = exo_world
    table = synthetic_raw_embeddings(truth.B, raw_dim=16, rng=1)
    tc = exo_config(config, epochs=1)
    a = split_goods_crossvalidation(log, table, tc, rng=4)
    b = split_goods_crossvalidation(log, table, tc, rng=4)
    c = split_goods_crossvalidation(log, table, tc, rng=5)
    np.testing.assert_array_equal(a.out_of_sample.goods, b.out_of_sample.goods)
    assert a.out_of_sample.log_share_r2 == b.out_of_sample.log_share_r2
    assert not np.array_equal(a.out_of_sample.goods, c.out_of_sample.goods)
    assert a.in_sample.goods.size + a.out_of_sample.goods.size == truth.n_goods


def test_new_good_is_scored_without_retraining(exo_world):
    config, truth, log = exo_world
    extra = truth.B[:2] * np.array([1.0] + [0.5] * (config.dim - 1))
    table = synthetic_raw_embeddings(truth.B, raw_dim=16, rng=2, extra=extra)
    model = ExogenousDemandModel(embedding_dim=config.dim, hidden=config.hidden,
                                 max_len=config.max_len, epochs=1, batch_size=64).fit(log, table)
    new = model.embed([truth.n_goods, truth.n_goods + 1])
    assert new.shape == (2, config.dim)
    np.testing.assert_array_equal(model.params_.B, model.embed(np.arange(truth.n_goods)))
    res = incrementality(model.params_, [truth.n_goods, truth.n_goods + 1], "New", log, rng=0,
                         new_embeddings=new)
    assert np.isfinite(res.delta) and res.targets == (truth.n_goods, truth.n_goods + 1)
