"""Synthetic ground truth, panel simulation and salience-boost experiments.

Every simulated user owns a private uniform stream derived from
``(seed, stream tag, user key)``.  A user-day consumes ``layout.total``
uniforms for page construction and one for the choice, so the same user
key sees the same randomness under any policy or boost.  Runs are
therefore reproducible, independent of batch composition, and coupled
across arms and policies (common random numbers).  The oracle's ranking
noise comes from a separate per-user stream under ``NOISE_TAG`` so it
does not shift the page and choice uniforms.
"""
from __future__ import annotations

import dataclasses
from typing import Sequence

import numpy as np
from scipy.special import ndtri

from . import core
from .params import ModelParameters, SequenceWeights
from .policies import OraclePolicy, PageContext, Policy
from .types import InteractionLog, RecommendationPage, SlotLayout
from .utils import as_generator, seed_from

SIMULATION_TAG = 1
PRIOR_TAG = 2
NOISE_TAG = 3


@dataclasses.dataclass
class WorldConfig:
    n_users: int = 2000
    n_goods: int = 200
    dim: int = 8
    horizon: int = 60
    capacities: tuple[int, ...] = (1, 5, 15)
    exploration_rate: float = 0.2
    ranking_noise: float = 0.5  # Gumbel scale of the oracle's utility prediction error
    n_categories: int = 7
    categories: tuple[int, ...] | None = None
    # ground-truth scales
    popularity_mean: float = -10.0
    popularity_sd: float = 1.3
    row_scale_sd: float = 0.1
    taste_scale: float = 2.5
    taste_noise: float = 0.4
    persistence: float = 0.4
    beta_levels: tuple[float, ...] = (4.0, 3.0, 2.0)
    beta_sd: float = 0.2
    seq_noise: float = 0.05
    max_len: int = 4
    hidden: int = 16
    prior_length: int = 2
    seed: int = 0

    def __post_init__(self):
        self.capacities = tuple(int(c) for c in self.capacities)
        self.beta_levels = tuple(float(b) for b in self.beta_levels)
        if self.categories is not None:
            self.categories = tuple(int(c) for c in self.categories)
        self.validate()

    def validate(self) -> None:
        if not 0.0 <= self.exploration_rate <= 1.0:
            raise ValueError("exploration_rate must lie in [0, 1]")
        if self.ranking_noise < 0:
            raise ValueError("ranking_noise must be >= 0")
        if not self.capacities or min(self.capacities) < 1:
            raise ValueError("slot capacities must be >= 1")
        if self.n_users < 0 or self.n_goods < 1 or self.dim < 2 or self.horizon < 0:
            raise ValueError("need n_users >= 0, n_goods >= 1, dim >= 2, horizon >= 0")
        if self.categories is not None and len(self.categories) != self.n_goods:
            raise ValueError("category labels must cover every good")
        if len(self.beta_levels) != len(self.capacities):
            raise ValueError("need one beta level per slot")
        if not 0 <= self.prior_length <= self.max_len:
            raise ValueError("prior_length must lie in [0, max_len]")
        if self.hidden < self.dim:
            raise ValueError("hidden width must be at least the embedding dimension")

    @property
    def layout(self) -> SlotLayout:
        return SlotLayout(self.capacities)

    def category_labels(self) -> np.ndarray:
        if self.categories is not None:
            return np.asarray(self.categories, dtype=np.int64)
        return np.arange(self.n_goods) % self.n_categories


@dataclasses.dataclass(frozen=True)
class ExperimentArm:
    arm_id: str
    focal_categories: tuple[int, ...]
    boost_factor: float
    user_share: float

    def __post_init__(self):
        object.__setattr__(self, "focal_categories", tuple(int(c) for c in self.focal_categories))
        if self.boost_factor <= 0:
            raise ValueError("boost factor must be positive")
        if not 0.0 <= self.user_share <= 1.0:
            raise ValueError("user share must lie in [0, 1]")
        if self.arm_id == CONTROL:
            raise ValueError(f"arm id {CONTROL!r} is reserved")

    def focal_goods(self, categories: np.ndarray) -> np.ndarray:
        goods = np.flatnonzero(np.isin(categories, self.focal_categories))
        if goods.size == 0:
            raise ValueError(f"arm {self.arm_id!r} has an empty focal set")
        return goods

    def boost_vector(self, categories: np.ndarray) -> np.ndarray:
        boost = np.ones(len(categories))
        boost[self.focal_goods(categories)] = self.boost_factor
        return boost


CONTROL = "control"


def category_centers(n_cat: int, dim: int, rng) -> np.ndarray:
    """Unit taste directions, one per category.

    When they fit, the directions form a randomly rotated regular simplex, so
    every pair of categories has the same negative affinity -1/(n_cat - 1).
    """
    if n_cat == 1:
        c = rng.normal(size=(1, dim))
    elif n_cat <= dim:
        q, _ = np.linalg.qr(rng.normal(size=(dim, n_cat)))
        c = q.T - q.T.mean(axis=0)
    else:
        c = rng.normal(size=(n_cat, dim))
    return c / np.linalg.norm(c, axis=1, keepdims=True)


def balanced_levels(levels: np.ndarray, cats: np.ndarray, rng) -> np.ndarray:
    """Reassign ``levels`` so every category gets the same spread of values.

    The largest level goes to a random good of one category, the next to
    another category, and so on; this keeps cold-start users from all
    drifting into whichever category happens to hold the top good.
    """
    key = np.empty(len(cats))
    for k in np.unique(cats):
        members = np.flatnonzero(cats == k)
        key[members] = (rng.permutation(len(members)) + rng.random()) / len(members)
    out = np.empty(len(cats))
    out[np.argsort(key, kind="stable")] = np.sort(levels)[::-1]
    return out


def generate_ground_truth(config: WorldConfig, rng=None) -> ModelParameters:
    """Draw a truth whose state is roughly (1, mean taste of recent history).

    Dimension 0 of each good embedding is its popularity level; the other
    dimensions hold a category taste direction scaled by a log-normal row
    scale.  The sequence weights are set in the near-linear range of tanh so
    that the state tracks the average taste of the history, then perturbed.
    """
    rng = as_generator(config.seed if rng is None else rng)
    J, d, h = config.n_goods, config.dim, config.hidden
    cats = config.category_labels()
    n_cat = int(cats.max()) + 1

    centers = category_centers(n_cat, d - 1, rng) * config.taste_scale
    row_scale = np.exp(config.row_scale_sd * rng.normal(size=J))
    spread = config.taste_noise * config.taste_scale / np.sqrt(d - 1)
    taste = row_scale[:, None] * (centers[cats] + spread * rng.normal(size=(J, d - 1)))
    quantiles = ndtri((np.arange(J) + 0.5) / J)
    pop = balanced_levels(config.popularity_mean + config.popularity_sd * quantiles, cats, rng)
    B = np.column_stack([pop, taste])

    levels = np.asarray(config.beta_levels)
    beta = levels[None, :] * np.exp(config.beta_sd * rng.normal(size=(J, 1)))

    alpha, noise = 0.1, config.seq_noise
    seq = SequenceWeights.zeros(d, config.max_len, hidden=h)
    seq = seq.map(lambda a: noise * rng.normal(size=a.shape))
    # tanh-input maps are near-linear with gain alpha, perturbed relative to it;
    # output maps undo the gain.  The large popularity coordinate stays out of
    # the hidden layers so the perturbations cannot shift the state.
    seq.W1 = alpha * (np.eye(d, h) + noise * rng.normal(size=(d, h)))
    seq.W1[0, 1:] = 0.0
    seq.b1 *= alpha
    seq.W1_out[:d, 1:] += np.eye(d) / alpha
    seq.W2 = alpha * (np.eye(d, h) + noise * rng.normal(size=(d, h)))
    seq.W2[0, :] = 0.0
    seq.b2 *= alpha
    seq.W2_out[1:d, 1:] += config.persistence / alpha * np.eye(d - 1)
    default_state = np.zeros(d)
    default_state[0] = 1.0
    seq.b2_out[:] = default_state
    params = ModelParameters(B=B, beta=beta, default_state=default_state, seq=seq)
    params.validate()
    return params


def user_uniforms(seed: int, keys: np.ndarray, horizon: int, width: int,
                  tag: int = SIMULATION_TAG) -> np.ndarray:
    """(n_users, horizon, width) uniforms; row ``n`` depends only on (seed, tag, keys[n])."""
    out = np.empty((len(keys), horizon, width))
    for n, key in enumerate(np.asarray(keys).tolist()):
        ss = np.random.SeedSequence([int(seed) & (2**63 - 1), tag, int(key)])
        out[n] = np.random.Generator(np.random.PCG64(ss)).random((horizon, width))
    return out


def draw_choices(probs: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Inverse-CDF choice draws; returns good indices or -1 for the outside option."""
    J = probs.shape[1] - 1
    cdf = np.cumsum(probs, axis=1)
    idx = np.minimum((cdf < u[:, None]).sum(axis=1), J)
    return np.where(idx == J, -1, idx)


def draw_prior_histories(truth: ModelParameters, categories: np.ndarray, keys: np.ndarray,
                         length: int, seed: int) -> np.ndarray:
    """Pre-panel watch histories, (n_users, length), most recent first.

    Each user gets a uniformly drawn favorite category and ``length``
    distinct goods from it, sampled without replacement in proportion to
    their cold-start choice weight exp(default_state . B_j).
    """
    keys = np.asarray(keys, dtype=np.int64)
    out = np.full((len(keys), length), -1, dtype=np.int64)
    if length == 0:
        return out
    cats = np.unique(categories)
    logw = truth.B @ truth.default_state
    for n, key in enumerate(keys.tolist()):
        ss = np.random.SeedSequence([int(seed) & (2**63 - 1), PRIOR_TAG, int(key)])
        g = np.random.Generator(np.random.PCG64(ss))
        members = np.flatnonzero(categories == cats[g.integers(len(cats))])
        keyed = logw[members] + g.gumbel(size=members.size)
        top = members[np.argsort(-keyed, kind="stable")[:length]]
        out[n, :top.size] = top
    return out


def run_users(truth: ModelParameters, layout: SlotLayout, users: np.ndarray, keys: np.ndarray,
              horizon: int, policy: Policy, seed: int, tag: int = SIMULATION_TAG,
              arm: str | None = None, prior: np.ndarray | None = None,
              batch: int = 2500, return_expected: bool = False):
    """Simulate ``users`` (with stream keys ``keys``) for ``horizon`` days under ``policy``.

    ``prior`` is an optional (n_users, p) matrix of pre-panel goods, most
    recent first, padded with -1.  With ``return_expected`` the result is
    ``(log, prob_sum)`` where ``prob_sum`` adds up the (J + 1) choice
    probabilities over all simulated user-days.
    """
    users = np.asarray(users, dtype=np.int64)
    keys = np.asarray(keys, dtype=np.int64)
    J = truth.n_goods
    if layout.n_slots != truth.n_slots:
        raise ValueError("slot layout does not match the truth's slot count")
    if layout.total > J:
        raise ValueError(f"slot capacities ({layout.total}) exceed catalog size ({J})")
    parts = []
    prob_sum = np.zeros(J + 1)
    for lo in range(0, len(users), batch):
        P = None if prior is None else prior[lo:lo + batch]
        *cols, psum = _run_batch(truth, layout, users[lo:lo + batch], keys[lo:lo + batch],
                                 horizon, policy, seed, tag, P)
        parts.append(cols)
        prob_sum += psum
    if parts:
        cols = [np.concatenate(c) for c in zip(*parts)]
    else:
        cols = [np.zeros(0, np.int64)] * 3 + [np.zeros((0, layout.total), np.int64)]
    arms = {int(u): arm for u in users.tolist()} if arm is not None else {}
    prior_map = {}
    if prior is not None:
        prior_map = {int(u): tuple(int(g) for g in row if g >= 0)
                     for u, row in zip(users.tolist(), prior)}
    log = InteractionLog(cols[0], cols[1], cols[2], cols[3], layout, J, arms, prior_map)
    return (log, prob_sum) if return_expected else log


def _run_batch(truth, layout, users, keys, horizon, policy, seed, tag, prior=None):
    N, J, K, L = len(users), truth.n_goods, layout.total, truth.max_len
    U = user_uniforms(seed, keys, horizon, K + 1, tag)
    H = np.full((N, L), -1, dtype=np.int64)
    lengths = np.zeros(N, dtype=np.int64)
    watched = np.zeros((N, J), dtype=bool)
    rows = np.arange(N)
    if prior is not None and prior.size:
        p = min(prior.shape[1], L)
        H[:, :p] = prior[:, :p]
        lengths = (H >= 0).sum(axis=1)
        ok = prior >= 0
        watched[np.nonzero(ok)[0], prior[ok]] = True
    days, choices, pages_out = [], [], []
    prob_sum = np.zeros(J + 1)
    noise_streams = None
    if getattr(policy, "noise_scale", 0.0) > 0:
        noise_streams = [np.random.Generator(np.random.PCG64(
            np.random.SeedSequence([int(seed) & (2**63 - 1), tag, NOISE_TAG, int(k)])))
            for k in keys.tolist()]
    for t in range(horizon):
        A = core.encode_states(H, lengths, truth.B, truth.seq, truth.default_state)
        ctx = PageContext(truth, A, H, lengths, watched, U[:, t, :K], layout, users, t)
        if noise_streams is not None:
            ctx.noise = np.stack([g.gumbel(size=J) for g in noise_streams])
        pages = policy.pages(ctx)
        probs = core.choice_probs(core.utilities(A, truth, pages, layout))
        choice = draw_choices(probs, U[:, t, K])
        prob_sum += probs.sum(axis=0)
        days.append(np.full(N, t, dtype=np.int64))
        choices.append(choice)
        pages_out.append(pages)
        inside = choice >= 0
        if inside.any():
            H[inside, 1:] = H[inside, :-1]
            H[inside, 0] = choice[inside]
            lengths[inside] = np.minimum(lengths[inside] + 1, L)
            watched[rows[inside], choice[inside]] = True
    if horizon == 0:
        return (np.zeros(0, np.int64),) * 3 + (np.zeros((0, K), np.int64), prob_sum)
    return (np.tile(users, horizon), np.concatenate(days), np.concatenate(choices),
            np.concatenate(pages_out), prob_sum)


def default_policy(truth: ModelParameters, config: WorldConfig, boost=None) -> OraclePolicy:
    return OraclePolicy(truth, config.exploration_rate, boost, config.ranking_noise)


def simulate_panel(truth: ModelParameters, config: WorldConfig, policy: Policy | None = None,
                   rng=None) -> InteractionLog:
    """Panel of ``config.n_users`` users over ``config.horizon`` days.

    ``rng`` (int seed or Generator) overrides ``config.seed``.
    """
    policy = default_policy(truth, config) if policy is None else policy
    seed = config.seed if rng is None else seed_from(rng)
    users = np.arange(config.n_users)
    prior = draw_prior_histories(truth, config.category_labels(), users, config.prior_length, seed)
    return run_users(truth, config.layout, users, users, config.horizon, policy, seed, prior=prior)


def oracle_recommender(state: np.ndarray, params: ModelParameters, config: WorldConfig,
                       rng=None, watched: Sequence[int] = (), boost=None) -> RecommendationPage:
    """One page from the exploring oracle for a single user state."""
    layout = config.layout
    if layout.total > params.n_goods:
        raise ValueError(f"slot capacities ({layout.total}) exceed catalog size ({params.n_goods})")
    rng = as_generator(rng)
    mask = np.zeros((1, params.n_goods), dtype=bool)
    mask[0, list(watched)] = True
    state = np.asarray(state, dtype=np.float64).reshape(1, -1)
    ctx = PageContext(params, state, np.full((1, 1), -1), np.zeros(1, np.int64), mask,
                      rng.random((1, layout.total)), layout, np.zeros(1, np.int64), 0)
    ctx.noise = rng.gumbel(size=(1, params.n_goods))
    row = OraclePolicy(params, config.exploration_rate, boost, config.ranking_noise).pages(ctx)[0]
    return RecommendationPage.from_array(row, layout.capacities)


def assign_arms(n_users: int, arms: Sequence[ExperimentArm], rng) -> dict[str, np.ndarray]:
    """User-level randomization; arm sizes are floor(share * n), control takes the rest."""
    total = sum(a.user_share for a in arms)
    if total > 1.0 + 1e-12:
        raise ValueError("arm user shares exceed 1")
    ids = [a.arm_id for a in arms]
    if len(set(ids)) != len(ids):
        raise ValueError("arm ids must be unique")
    perm = as_generator(rng).permutation(n_users)
    out, start = {}, 0
    for a in arms:
        size = int(np.floor(a.user_share * n_users + 1e-9))
        out[a.arm_id] = np.sort(perm[start:start + size])
        start += size
    out[CONTROL] = np.sort(perm[start:])
    return out


def run_salience_experiment(truth: ModelParameters, config: WorldConfig,
                            arms: Sequence[ExperimentArm], rng=None,
                            common_random_numbers: bool = True) -> dict[str, InteractionLog]:
    """Randomize users to arms plus control and simulate each group.

    Within an arm the oracle's selection weights for focal goods are
    multiplied by the arm's boost factor.  With common random numbers the
    k-th user of every group shares a uniform stream, so a boost of 1
    reproduces the control log exactly (up to user ids).
    """
    seed = config.seed if rng is None else seed_from(rng)
    cats = config.category_labels()
    boosts = {a.arm_id: a.boost_vector(cats) for a in arms}
    groups = assign_arms(config.n_users, arms, np.random.default_rng([seed, 7]))
    out = {}
    for arm_id, users in groups.items():
        policy = default_policy(truth, config, boosts.get(arm_id))
        keys = np.arange(len(users)) if common_random_numbers else users
        prior = draw_prior_histories(truth, cats, keys, config.prior_length, seed)
        out[arm_id] = run_users(truth, config.layout, users, keys, config.horizon, policy, seed,
                                arm=arm_id, prior=prior)
    return out
