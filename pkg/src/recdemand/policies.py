"""Recommendation policies.

A policy turns a batch of user-days (states, histories, watched sets and a
block of per-user uniforms) into page arrays of shape (N, layout.total),
filling positions in slot order and never recommending a watched good.
Every policy consumes at most one uniform per page position, which keeps
runs with different policies on common random numbers.
"""
from __future__ import annotations

import dataclasses

import numpy as np
from scipy.optimize import minimize_scalar
from scipy.special import expit

from . import core
from .params import ModelParameters
from .types import InteractionLog, SlotLayout

POLICY_KINDS = ("current", "random", "popularity", "mf", "imputed_utility", "imputed_recmodel")


@dataclasses.dataclass
class PageContext:
    params: ModelParameters  # parameters that produced ``states``
    states: np.ndarray
    H: np.ndarray
    lengths: np.ndarray
    watched: np.ndarray
    uniforms: np.ndarray  # (N, layout.total)
    layout: SlotLayout
    users: np.ndarray
    day: int
    noise: np.ndarray | None = None  # (N, J) standard Gumbel draws for noisy rankers


def _states_for(params, ctx: PageContext) -> np.ndarray:
    if params is ctx.params:
        return ctx.states
    return core.encode_states(ctx.H[:, : params.seq.max_len], ctx.lengths, params.B, params.seq,
                              params.default_state)


def weighted_pick(weights: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Inverse-CDF draw of one column per row, proportional to nonnegative ``weights``.

    Rows with zero total weight return -1.
    """
    cw = np.cumsum(weights, axis=1)
    total = cw[:, -1]
    target = u * total
    idx = np.argmax(cw > target[:, None], axis=1)
    return np.where(total > 0, idx, -1)


def sequential_softmax_pages(scores: np.ndarray, eligible: np.ndarray, uniforms: np.ndarray,
                             n_slots: int) -> np.ndarray:
    """Softmax sampling without replacement, one uniform per draw."""
    N = scores.shape[0]
    eligible = eligible.copy()
    pages = np.full((N, n_slots), -1, dtype=np.int64)
    rows = np.arange(N)
    for k in range(n_slots):
        masked = np.where(eligible, scores, -np.inf)
        m = masked.max(axis=1)
        m = np.where(np.isfinite(m), m, 0.0)
        w = np.where(eligible, np.exp(masked - m[:, None]), 0.0)
        idx = weighted_pick(w, uniforms[:, k])
        pages[:, k] = idx
        ok = idx >= 0
        eligible[rows[ok], idx[ok]] = False
    return pages


def ranked_pages(scores: np.ndarray, eligible: np.ndarray, n_slots: int) -> np.ndarray:
    """Deterministic top-n by score (ties to the lower good index)."""
    keyed = np.where(eligible, scores, -np.inf)
    order = np.argsort(-keyed, axis=1, kind="stable")[:, :n_slots]
    top = np.take_along_axis(keyed, order, axis=1)
    return np.where(np.isfinite(top), order, -1)


def plackett_luce_suffix(scores: np.ndarray, eligible: np.ndarray, pages: np.ndarray):
    """Log score-mass still unranked before each page position.

    ``pages`` lists goods in rank order, padded with -1.  Returns
    ``(log_suffix, page_scores, remaining)`` where ``log_suffix`` and
    ``page_scores`` are (n, K) and ``remaining`` marks eligible goods off
    the page.
    """
    n = scores.shape[0]
    rows = np.arange(n)
    onpage = pages >= 0
    pr, pk = np.nonzero(onpage)
    remaining = eligible.copy()
    remaining[pr, pages[pr, pk]] = False
    masked = np.where(remaining, scores, -np.inf)
    page_scores = np.where(onpage, scores[rows[:, None], np.maximum(pages, 0)], -np.inf)
    m = np.maximum(masked.max(axis=1, initial=-np.inf), page_scores.max(axis=1, initial=-np.inf))
    m = np.where(np.isfinite(m), m, 0.0)
    off_page = np.exp(masked - m[:, None]).sum(axis=1)
    page_exp = np.exp(page_scores - m[:, None])
    suffix = np.cumsum(page_exp[:, ::-1], axis=1)[:, ::-1] + off_page[:, None]
    with np.errstate(divide="ignore"):
        log_suffix = np.log(suffix) + m[:, None]
    return log_suffix, page_scores, remaining


def ranking_log_likelihood(scores: np.ndarray, eligible: np.ndarray, pages: np.ndarray) -> float:
    """Plackett-Luce log-likelihood of observed pages as top-ranked prefixes."""
    log_suffix, page_scores, _ = plackett_luce_suffix(scores, eligible, pages)
    onpage = pages >= 0
    with np.errstate(invalid="ignore"):
        terms = np.where(onpage, page_scores - log_suffix, 0.0)
    return float(terms.sum())


def fit_rank_temperature(logits: np.ndarray, eligible: np.ndarray, pages: np.ndarray,
                         bounds: tuple[float, float] = (0.01, 10.0)) -> float:
    """Temperature maximising the ranking likelihood of ``pages`` under ``logits / t``."""
    if not np.any(pages >= 0):
        return 1.0

    def nll(log_t):
        return -ranking_log_likelihood(logits * np.exp(-log_t), eligible, pages)

    res = minimize_scalar(nll, bounds=(np.log(bounds[0]), np.log(bounds[1])), method="bounded")
    return float(np.exp(res.x))


class Policy:
    kind = "base"

    def pages(self, ctx: PageContext) -> np.ndarray:
        raise NotImplementedError

    def __repr__(self):
        return f"{type(self).__name__}()"


class OraclePolicy(Policy):
    """Targeting recommender with per-pick epsilon-uniform exploration.

    Each position goes to the highest predicted-utility unpicked good with
    probability 1 - epsilon, otherwise to a uniformly drawn unpicked good.
    The platform's predicted utility is the true intrinsic utility plus
    ``noise_scale`` times a per-user-day Gumbel draw (``ctx.noise``).
    ``boost`` multiplies per-good selection weights (salience experiments):
    exploitation ranks by predicted utility + log(boost), exploration draws
    in proportion to boost.
    """

    kind = "current"

    def __init__(self, params: ModelParameters, epsilon: float, boost: np.ndarray | None = None,
                 noise_scale: float = 0.0):
        if not 0.0 <= epsilon <= 1.0:
            raise ValueError("exploration rate must lie in [0, 1]")
        if noise_scale < 0:
            raise ValueError("noise scale must be >= 0")
        self.params = params
        self.epsilon = float(epsilon)
        self.noise_scale = float(noise_scale)
        self.boost = None if boost is None else np.asarray(boost, dtype=np.float64)
        if self.boost is not None and (self.boost <= 0).any():
            raise ValueError("boost factors must be positive")

    def pages(self, ctx: PageContext) -> np.ndarray:
        J = self.params.n_goods
        K = ctx.layout.total
        if K > J:
            raise ValueError(f"slot capacities ({K}) exceed catalog size ({J})")
        scores = _states_for(self.params, ctx) @ self.params.B.T
        boost = np.ones(J) if self.boost is None else self.boost
        key = scores + np.log(boost)
        if self.noise_scale > 0:
            if ctx.noise is None:
                raise ValueError("noisy oracle needs per-user-day noise draws")
            key = key + self.noise_scale * ctx.noise
        eligible = ~ctx.watched.copy()
        N = scores.shape[0]
        rows = np.arange(N)
        pages = np.full((N, K), -1, dtype=np.int64)
        eps = self.epsilon
        for k in range(K):
            u = ctx.uniforms[:, k]
            exploit = np.argmax(np.where(eligible, key, -np.inf), axis=1)
            if eps > 0:
                explore_u = np.minimum(u / eps, 1.0 - 1e-16)
                explore = weighted_pick(np.where(eligible, boost, 0.0), explore_u)
                idx = np.where(u < eps, explore, exploit)
            else:
                idx = exploit
            idx = np.where(eligible.any(axis=1), idx, -1)
            pages[:, k] = idx
            ok = idx >= 0
            eligible[rows[ok], idx[ok]] = False
        return pages


class RandomPolicy(Policy):
    kind = "random"

    def pages(self, ctx: PageContext) -> np.ndarray:
        eligible = ~ctx.watched
        weights = eligible.astype(np.float64)
        N, J = weights.shape
        pages = np.full((N, ctx.layout.total), -1, dtype=np.int64)
        eligible = eligible.copy()
        rows = np.arange(N)
        for k in range(ctx.layout.total):
            idx = weighted_pick(eligible.astype(np.float64), ctx.uniforms[:, k])
            pages[:, k] = idx
            ok = idx >= 0
            eligible[rows[ok], idx[ok]] = False
        return pages


class PopularityPolicy(Policy):
    """Same market-share ranking for every user, skipping watched goods."""

    kind = "popularity"

    def __init__(self, shares: np.ndarray):
        self.shares = np.asarray(shares, dtype=np.float64)

    @classmethod
    def from_log(cls, log: InteractionLog) -> "PopularityPolicy":
        if log.n_events == 0:
            raise ValueError("popularity policy needs a nonempty log")
        return cls(log.choice_shares()[: log.n_goods])

    def pages(self, ctx: PageContext) -> np.ndarray:
        N = ctx.watched.shape[0]
        scores = np.broadcast_to(self.shares, (N, self.shares.size))
        return ranked_pages(scores, ~ctx.watched, ctx.layout.total)


@dataclasses.dataclass
class MFFactors:
    U: np.ndarray  # (n_users, k)
    V: np.ndarray  # (n_goods, k)
    users: np.ndarray  # user ids, row order of U

    @property
    def rank(self) -> int:
        return self.V.shape[1]

    def user_rows(self, users: np.ndarray) -> np.ndarray:
        lookup = {u: i for i, u in enumerate(self.users.tolist())}
        return np.array([lookup.get(u, -1) for u in np.asarray(users).tolist()], dtype=np.int64)

    def scores(self, users: np.ndarray) -> np.ndarray:
        rows = self.user_rows(users)
        # cold users: population-average factor, i.e. popularity along the singular directions
        fallback = self.U.mean(axis=0) if self.U.shape[0] else np.zeros(self.rank)
        factors = np.where((rows >= 0)[:, None], self.U[np.maximum(rows, 0)], fallback)
        return factors @ self.V.T


def consumption_matrix(log: InteractionLog) -> tuple[np.ndarray, np.ndarray]:
    users = log.unique_users()
    M = np.zeros((users.size, log.n_goods))
    inside = log.choices >= 0
    rows = np.searchsorted(users, log.users[inside])
    M[rows, log.choices[inside]] = 1.0
    return M, users


def fit_mf(log: InteractionLog, rank: int) -> MFFactors:
    """Truncated SVD of the binary user x good consumption matrix."""
    if rank < 1:
        raise ValueError("rank must be >= 1")
    if log.n_events == 0:
        raise ValueError("matrix factorization needs a nonempty log")
    M, users = consumption_matrix(log)
    if rank > min(M.shape):
        raise ValueError(f"rank {rank} exceeds min matrix dimension {min(M.shape)}")
    return _svd_factors(M, rank, users)


def _svd_factors(M: np.ndarray, rank: int, users: np.ndarray) -> MFFactors:
    u, s, vt = np.linalg.svd(M, full_matrices=False)
    u, s, vt = u[:, :rank], s[:rank], vt[:rank]
    # deterministic sign: largest-magnitude entry of each right vector positive
    flip = np.sign(vt[np.arange(rank), np.argmax(np.abs(vt), axis=1)])
    flip[flip == 0] = 1.0
    return MFFactors(U=u * s * flip, V=vt.T * flip, users=np.asarray(users))


class MFPolicy(Policy):
    kind = "mf"

    def __init__(self, factors: MFFactors):
        self.factors = factors

    def pages(self, ctx: PageContext) -> np.ndarray:
        return ranked_pages(self.factors.scores(ctx.users), ~ctx.watched, ctx.layout.total)


class _TemperedImputation(Policy):
    """Softmax sampling on model logits divided by a temperature.

    The logits need not share the scale of the ranking that produced the
    observed pages.  :meth:`calibrated` picks the temperature by ranking
    likelihood on a log's realized pages.
    """

    def __init__(self, model, temperature: float = 1.0):
        if not temperature > 0:
            raise ValueError("temperature must be positive")
        self.temperature = float(temperature)

    def logits(self, H: np.ndarray, lengths: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    @classmethod
    def calibrated(cls, model, log: InteractionLog, max_events: int = 30000, seed: int = 0):
        H, lengths = log.histories(model.max_len)
        idx = np.arange(log.n_events)
        if idx.size > max_events:
            idx = np.sort(np.random.default_rng(seed).choice(idx, max_events, replace=False))
        logits = cls(model).logits(H[idx], lengths[idx])
        eligible = ~log.watched_mask()[idx]
        return cls(model, fit_rank_temperature(logits, eligible, log.pages[idx]))

    def __repr__(self):
        return f"{type(self).__name__}(temperature={self.temperature:.4g})"

    def pages(self, ctx: PageContext) -> np.ndarray:
        return sequential_softmax_pages(self.scores(ctx), ~ctx.watched, ctx.uniforms,
                                        ctx.layout.total)


class ImputedUtilityPolicy(_TemperedImputation):
    """Pages drawn by softmax sampling on predicted (intrinsic) utility."""

    kind = "imputed_utility"

    def __init__(self, params: ModelParameters, temperature: float = 1.0):
        super().__init__(params, temperature)
        self.params = params

    def logits(self, H, lengths):
        p = self.params
        return core.encode_states(H[:, : p.seq.max_len], lengths, p.B, p.seq, p.default_state) @ p.B.T

    def scores(self, ctx: PageContext) -> np.ndarray:
        return _states_for(self.params, ctx) @ self.params.B.T / self.temperature


class ImputedRecModelPolicy(_TemperedImputation):
    """Pages drawn by softmax sampling on a fitted recommendation model's logits."""

    kind = "imputed_recmodel"

    def __init__(self, recmodel, temperature: float = 1.0):
        super().__init__(recmodel, temperature)
        self.recmodel = recmodel

    def logits(self, H, lengths):
        return self.recmodel.logits_from_histories(H, lengths)

    def scores(self, ctx: PageContext) -> np.ndarray:
        return self.logits(ctx.H, ctx.lengths) / self.temperature

    def probabilities(self, ctx: PageContext) -> np.ndarray:
        return expit(self.recmodel.logits_from_histories(ctx.H, ctx.lengths))
