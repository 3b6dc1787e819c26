import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from recdemand import core
from recdemand.params import ModelParameters, SequenceWeights
from recdemand.types import Catalog, InteractionLog, RecommendationPage, SlotLayout, UserHistory

from conftest import random_params


def scalar_state(goods_recent_first, params):
    """Straight-line evaluation of the attention state, one scalar at a time."""
    seq = params.seq
    d = params.dim
    h1 = seq.W1.shape[1]
    h2 = seq.W2.shape[1]
    if not goods_recent_first:
        return list(params.default_state)
    logits, values = [], []
    for l, g in enumerate(goods_recent_first):
        x = [params.B[g, k] + seq.pos_embed[l, k] for k in range(d)]
        hid = [math.tanh(sum(x[k] * seq.W1[k, m] for k in range(d)) + seq.b1[m]) for m in range(h1)]
        out = [sum(hid[m] * seq.W1_out[m, c] for m in range(h1)) + seq.b1_out[c] for c in range(1 + d)]
        logits.append(out[0])
        values.append(out[1:])
    top = max(logits)
    ex = [math.exp(z - top) for z in logits]
    tot = sum(ex)
    s = [sum(ex[l] / tot * values[l][k] for l in range(len(ex))) for k in range(d)]
    g2 = [math.tanh(sum(s[k] * seq.W2[k, m] for k in range(d)) + seq.b2[m]) for m in range(h2)]
    return [sum(g2[m] * seq.W2_out[m, k] for m in range(h2)) + seq.b2_out[k] for k in range(d)]


def test_empty_history_returns_default_state():
    params = random_params(seed=1)
    state = core.compute_user_state(UserHistory((), 5), params)
    np.testing.assert_array_equal(state, params.default_state)


def test_zero_weights_give_output_bias():
    params = ModelParameters.zeros(5, 3, max_len=4)
    params.seq.b2_out[:] = [0.3, -1.0, 2.0]
    params.B[:] = np.random.default_rng(0).normal(size=params.B.shape)
    state = core.compute_user_state(UserHistory(((0, 1), (2, 4), (5, 0)), 4), params)
    np.testing.assert_array_equal(state, [0.3, -1.0, 2.0])


@pytest.mark.parametrize("seed", range(5))
def test_state_matches_scalar_oracle(seed):
    params = random_params(n_goods=7, dim=3, hidden=5, scale=0.7, seed=seed)
    rng = np.random.default_rng(seed + 100)
    goods = rng.choice(7, size=3, replace=False).tolist()
    history = UserHistory(tuple(enumerate(goods)), 5)
    state = core.compute_user_state(history, params)
    np.testing.assert_allclose(state, scalar_state(goods[::-1], params), rtol=0, atol=1e-12)


def test_deterministic_utility_cases():
    params = ModelParameters.zeros(4, 3)
    page = RecommendationPage.empty((1, 5, 15))
    assert core.deterministic_utility(np.zeros(3), 2, page, params) == 0.0
    params.B[1] = [2.0, 0.0, 0.0]
    params.beta[1, 0] = 0.5
    on_page = RecommendationPage({0: (1,)}, (1, 5, 15))
    assert core.deterministic_utility(np.array([1.0, 0, 0]), 1, on_page, params) == 2.5


def test_bonus_is_additive():
    params = random_params(seed=2)
    state = np.random.default_rng(2).normal(size=3)
    caps = (1, 5, 15)
    for slot in range(3):
        page = RecommendationPage({slot: (4,)}, caps)
        diff = (core.deterministic_utility(state, 4, page, params)
                - core.deterministic_utility(state, 4, RecommendationPage.empty(caps), params))
        assert diff == pytest.approx(params.beta[4, slot], abs=1e-15)


def two_good_params(u):
    params = ModelParameters.zeros(2, 2)
    params.B[:, 0] = u
    return params


def test_choice_probability_closed_forms():
    page = RecommendationPage.empty((1, 5, 15))
    cat = Catalog.range(2, 2)
    state = np.array([1.0, 0.0])
    p = core.choice_probabilities(state, cat, page, two_good_params([0.0, 0.0]))
    np.testing.assert_allclose(p, [1 / 3] * 3, atol=1e-15)
    p = core.choice_probabilities(state, cat, page, two_good_params([math.log(2), 0.0]))
    np.testing.assert_allclose(p, [0.5, 0.25, 0.25], atol=1e-15)


def test_gumbel_argmax_reproduces_probabilities():
    rng = np.random.default_rng(11)
    U = np.array([[0.7, -0.2, 1.1, 0.0]])
    p = core.choice_probs(U)[0]
    n = 10 ** 6
    utilities = np.concatenate([U, np.zeros((1, 1))], axis=1) + rng.gumbel(size=(n, 5))
    freq = np.bincount(utilities.argmax(axis=1), minlength=5) / n
    se = np.sqrt(p * (1 - p) / n)
    assert np.all(np.abs(freq - p) < 3 * se + 1e-12)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(-30, 30), min_size=1, max_size=12))
def test_probabilities_sum_to_one(u):
    p = core.choice_probs(np.array([u]))
    assert abs(p.sum() - 1.0) < 1e-10
    assert np.all(p >= 0)
    assert core.engagement(p[0]) == pytest.approx(p[0, :-1].sum(), abs=1e-12)


def test_engagement_cases():
    assert core.engagement(np.array([0.5, 0.25, 0.25])) == 0.75
    assert core.engagement(np.full(10, 0.1)) == pytest.approx(0.9, abs=1e-15)


def make_log(users, days, choices, pages, caps=(1, 1, 1), n_goods=2):
    return InteractionLog(np.array(users), np.array(days), np.array(choices),
                          np.array(pages).reshape(len(users), sum(caps)), SlotLayout(caps), n_goods)


def test_log_likelihood_single_event():
    log = make_log([0], [0], [-1], [[-1, -1, -1]])
    params = ModelParameters.zeros(2, 2, max_len=3)
    assert core.log_likelihood(log, params) == pytest.approx(math.log(1 / 3), abs=1e-15)


def test_log_likelihood_matches_per_event_oracle():
    rng = np.random.default_rng(4)
    params = random_params(n_goods=6, dim=3, scale=0.8, seed=4)
    caps = (1, 1, 2)
    users, days, choices, pages = [], [], [], []
    for u in range(5):
        for t in range(3):
            users.append(u)
            days.append(t)
            choices.append(int(rng.integers(-1, 6)))
            pages.append(list(rng.choice(6, size=4, replace=False)))
    log = make_log(users, days, choices, pages, caps, 6)
    cat = Catalog.range(6, 3)
    total = 0.0
    for u in range(5):
        items = []
        for t in range(3):
            i = u * 3 + t
            page = RecommendationPage.from_array(np.array(pages[i]), caps)
            state = core.compute_user_state(UserHistory(tuple(items), params.max_len), params)
            p = core.choice_probabilities(state, cat, page, params)
            total += math.log(p[choices[i]])
            if choices[i] >= 0:
                items.append((t, choices[i]))
    assert core.log_likelihood(log, params) == pytest.approx(total, rel=1e-12)
    # additivity and order independence
    reversed_log = make_log(users[::-1], days[::-1], choices[::-1], pages[::-1], caps, 6)
    assert core.log_likelihood(reversed_log, params) == pytest.approx(total, rel=1e-12)


def test_out_of_catalog_good_is_rejected():
    params = ModelParameters.zeros(2, 2)
    with pytest.raises(KeyError):
        core.deterministic_utility(np.zeros(2), 5, RecommendationPage.empty((1, 5, 15)), params)
