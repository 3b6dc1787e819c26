"""Counterfactuals on a fitted (or true) demand model.

Covers alternative recommendation policies, concentration metrics, Wald and
model-based diversion ratios, the selection / exposure / targeting
decomposition of recommendation effects, and catalog incrementality.
All per-event work is chunked so memory stays bounded on large logs.
"""
from __future__ import annotations

import dataclasses
from typing import Iterable, Sequence

import numpy as np

from . import core
from .params import ModelParameters
from .policies import (POLICY_KINDS, ImputedRecModelPolicy, ImputedUtilityPolicy, MFPolicy,
                       OraclePolicy, Policy, PopularityPolicy, RandomPolicy, fit_mf,
                       plackett_luce_suffix)
from .simulator import SIMULATION_TAG, ExperimentArm, run_users
from .types import OUTSIDE, InteractionLog
from .utils import as_generator, seed_from

CHUNK = 10000


# -- policies ---------------------------------------------------------------

@dataclasses.dataclass
class PolicyConfig:
    exploration_rate: float = 0.2
    mf_rank: int = 10
    ranking_noise: float = 0.5


class ReplayPolicy(Policy):
    """Marker policy: keep the realized pages (and choices) of the base log."""

    kind = "replay"


def make_policy(kind: str, log: InteractionLog | None = None, params: ModelParameters | None = None,
                config: PolicyConfig | None = None, rng=None, recmodel=None) -> Policy:
    config = config or PolicyConfig()
    if kind == "replay":
        return ReplayPolicy()
    if kind not in POLICY_KINDS:
        raise ValueError(f"unknown policy {kind!r}; expected one of {POLICY_KINDS + ('replay',)}")
    if kind == "random":
        return RandomPolicy()
    if kind in ("popularity", "mf") and (log is None or log.n_events == 0):
        raise ValueError(f"{kind} policy needs a nonempty training log")
    if kind == "popularity":
        return PopularityPolicy.from_log(log)
    if kind == "mf":
        return MFPolicy(fit_mf(log, config.mf_rank))
    if kind == "imputed_recmodel":
        if recmodel is None:
            raise ValueError("imputed_recmodel policy needs a fitted recommendation model")
        if log is None or log.n_events == 0:
            return ImputedRecModelPolicy(recmodel)
        return ImputedRecModelPolicy.calibrated(recmodel, log)
    if params is None:
        raise ValueError(f"{kind} policy needs model parameters")
    if kind == "current":
        return OraclePolicy(params, config.exploration_rate, None, config.ranking_noise)
    return ImputedUtilityPolicy(params)


# -- diversity --------------------------------------------------------------

@dataclasses.dataclass(frozen=True)
class DiversityMetrics:
    hhi: float
    gini: float
    shares: np.ndarray  # inside shares renormalized to sum 1


def inside_shares(shares) -> np.ndarray:
    s = np.asarray(shares, dtype=np.float64).reshape(-1)
    if s.size == 0 or (s < 0).any() or not np.isfinite(s).all():
        raise ValueError("shares must be a nonempty vector of finite nonnegative values")
    total = s.sum()
    if total <= 0:
        raise ValueError("shares are all zero")
    return s / total


def diversity_metrics(shares) -> DiversityMetrics:
    """HHI and Gini of per-good (inside) shares; pass shares without the outside entry."""
    s = inside_shares(shares)
    n = s.size
    ranked = np.sort(s)
    # sum_i sum_j |s_i - s_j| = 2 sum_i (2i - n + 1) s_(i) for ascending order
    gini = float(np.dot(2 * np.arange(n) - n + 1, ranked) / n)
    return DiversityMetrics(float(np.dot(s, s)), max(gini, 0.0), s)


# -- diversion ---------------------------------------------------------------

class ZeroDenominatorError(ValueError):
    """The intervention did not move the focal goods' total share."""


@dataclasses.dataclass
class DiversionTable:
    arm_id: str
    destinations: np.ndarray  # good indices, OUTSIDE (-1) last
    values: np.ndarray
    denominator: float  # minus the change in focal share
    focal: tuple[int, ...]

    def total(self) -> float:
        return float(self.values.sum())

    def as_dict(self) -> dict[int, float]:
        return dict(zip(self.destinations.tolist(), self.values.tolist()))

    def __len__(self) -> int:
        return int(self.values.size)


def diversion_from_shares(treated: np.ndarray, control: np.ndarray, focal, arm_id: str = "treated",
                          tol: float = 1e-12) -> DiversionTable:
    """Diversion ratios from two (J + 1) share vectors laid out as (goods..., outside)."""
    treated = np.asarray(treated, dtype=np.float64)
    control = np.asarray(control, dtype=np.float64)
    if treated.shape != control.shape or treated.ndim != 1:
        raise ValueError("share vectors must have equal 1-d shapes")
    J = treated.size - 1
    focal = np.unique(np.asarray(list(focal), dtype=np.int64))
    if focal.size == 0:
        raise ValueError("focal set is empty")
    if focal.min() < 0 or focal.max() >= J:
        raise KeyError("focal goods outside the catalog")
    delta = treated - control
    denom = -float(delta[focal].sum())
    if not abs(denom) > tol:
        raise ZeroDenominatorError(
            f"focal share change {-denom:.3e} is within {tol:g} of zero; diversion undefined")
    keep = np.ones(J + 1, dtype=bool)
    keep[focal] = False
    dest = np.flatnonzero(keep)
    values = delta[dest] / denom
    dest = np.where(dest == J, OUTSIDE, dest)
    return DiversionTable(arm_id, dest, values, denom, tuple(focal.tolist()))


def wald_diversion(treated: InteractionLog, control: InteractionLog, focal,
                   arm_id: str = "treated", tol: float = 1e-12) -> DiversionTable:
    """Empirical diversion from per-user-day choice shares of two randomized groups."""
    if treated.n_events == 0 or control.n_events == 0:
        raise ValueError("both logs must be nonempty")
    if treated.n_goods != control.n_goods:
        raise ValueError("logs disagree on the number of goods")
    return diversion_from_shares(treated.choice_shares(), control.choice_shares(), focal,
                                 arm_id, tol)


def _chunks(n: int, size: int = CHUNK):
    for lo in range(0, n, size):
        yield slice(lo, min(lo + size, n))


def _score_model(imputation):
    if isinstance(imputation, ImputedRecModelPolicy):
        m = imputation.recmodel
        return m, m.B, m.bias, imputation.temperature
    if isinstance(imputation, ImputedUtilityPolicy):
        p = imputation.params
        return p, p.B, np.zeros(p.n_goods), imputation.temperature
    raise TypeError("imputation must be an ImputedUtilityPolicy or ImputedRecModelPolicy")


def imputation_scores(imputation, log: InteractionLog):
    """Per-event state matrix and a function mapping an event slice to (n, J) scores."""
    model, B, bias, temperature = _score_model(imputation)
    H, lengths = log.histories(model.max_len)
    states = core.encode_states(H, lengths, model.B, model.seq, model.default_state)
    return lambda sl: (states[sl] @ B.T + bias) / temperature


def _truncate_below(x: np.ndarray, upper: np.ndarray) -> np.ndarray:
    # a Gumbel draw conditioned to lie below ``upper``
    return -np.logaddexp(-upper, -x)


def conditional_gumbel_keys(scores: np.ndarray, eligible: np.ndarray, pages: np.ndarray,
                            rng: np.random.Generator) -> np.ndarray:
    """Gumbel perturbed scores drawn conditional on the page being the top-ranked goods.

    ``pages`` lists goods in rank order.  The returned keys sort the page
    goods first (in page order) followed by the remaining eligible goods;
    ineligible goods get -inf.
    """
    n, J = scores.shape
    rows = np.arange(n)
    K = pages.shape[1]
    onpage = pages >= 0
    loc, _, remaining = plackett_luce_suffix(scores, eligible, pages)
    G = rng.gumbel(size=(n, K))
    keys = np.full((n, J), -np.inf)
    upper = np.full(n, np.inf)
    for k in range(K):
        ok = onpage[:, k]
        x = _truncate_below(loc[:, k] + G[:, k], upper)
        keys[rows[ok], pages[ok, k]] = x[ok]
        upper = np.where(ok, x, upper)
    rest = _truncate_below(scores + rng.gumbel(size=(n, J)), upper[:, None])
    return np.where(remaining, rest, keys)


def rerank_pages(keys: np.ndarray, boost: np.ndarray, n_filled: np.ndarray, width: int) -> np.ndarray:
    """Top goods by key + log(boost), keeping each row's number of filled positions."""
    boosted = keys + np.log(boost)
    order = np.argsort(-boosted, axis=1, kind="stable")[:, :width]
    top = np.take_along_axis(boosted, order, axis=1)
    keep = (np.arange(width)[None, :] < n_filled[:, None]) & np.isfinite(top)
    return np.where(keep, order, -1)


def impute_boosted_pages(control: InteractionLog, boost: np.ndarray, imputation,
                         rng=None) -> np.ndarray:
    """Rebuild every control page as if the platform had multiplied selection weights by ``boost``.

    Page goods are treated as the top of a Plackett-Luce ranking on the
    imputation scores; perturbation keys are drawn conditional on the
    observed page, shifted by log(boost) and re-ranked.  A boost of 1
    returns the observed pages.
    """
    rng = as_generator(rng)
    boost = np.asarray(boost, dtype=np.float64)
    if boost.shape != (control.n_goods,) or (boost <= 0).any():
        raise ValueError("boost must be a positive vector over the catalog")
    score_fn = imputation_scores(imputation, control)
    watched = control.watched_mask()
    out = np.empty_like(control.pages)
    width = control.layout.total
    for sl in _chunks(control.n_events):
        pages = control.pages[sl]
        keys = conditional_gumbel_keys(score_fn(sl), ~watched[sl], pages, rng)
        out[sl] = rerank_pages(keys, boost, (pages >= 0).sum(axis=1), width)
    return out


def recommendation_rate_change(control: InteractionLog, pages: np.ndarray) -> np.ndarray:
    """Per-good change in the fraction of user-days recommended, ``pages`` vs the control's."""
    n = max(control.n_events, 1)
    J = control.n_goods
    new = np.bincount(pages[pages >= 0], minlength=J) / n
    return new - control.recommendation_rates()


def mean_probabilities(log: InteractionLog, params: ModelParameters,
                       pages: np.ndarray | None = None, states: np.ndarray | None = None) -> np.ndarray:
    """Average (J + 1) choice probabilities over the log's events."""
    if states is None:
        states = core.log_states(log, params)
    pages = log.pages if pages is None else pages
    total = np.zeros(params.n_goods + 1)
    for sl in _chunks(log.n_events):
        U = core.utilities(states[sl], params, pages[sl], log.layout)
        total += core.choice_probs(U).sum(axis=0)
    return total / max(log.n_events, 1)


def model_diversion(params: ModelParameters, control: InteractionLog, arm: ExperimentArm,
                    imputation, rng=None, categories=None, tol: float = 1e-12) -> DiversionTable:
    """Model-implied diversion for ``arm`` evaluated on the control group's user-days."""
    if control.n_events == 0:
        raise ValueError("control log is empty")
    cats = np.arange(control.n_goods) if categories is None else np.asarray(categories)
    focal = arm.focal_goods(cats)
    pages = impute_boosted_pages(control, arm.boost_vector(cats), imputation, rng)
    states = core.log_states(control, params)
    base = mean_probabilities(control, params, states=states)
    treated = mean_probabilities(control, params, pages=pages, states=states)
    return diversion_from_shares(treated, base, focal, arm.arm_id, tol)


# -- counterfactual simulation ------------------------------------------------

@dataclasses.dataclass
class CounterfactualResult:
    engagement: float
    shares: np.ndarray  # (J + 1), outside last
    diversity: DiversityMetrics
    log: InteractionLog | None = None


def _prior_matrix(base: InteractionLog, users: np.ndarray) -> np.ndarray | None:
    if not base.prior:
        return None
    width = max(len(g) for g in base.prior.values())
    P = np.full((users.size, width), -1, dtype=np.int64)
    for i, u in enumerate(users.tolist()):
        goods = base.prior.get(u, ())
        P[i, :len(goods)] = goods
    return P


def simulate_counterfactual(params: ModelParameters, policy: Policy, base: InteractionLog, rng=None,
                            horizon: int | None = None, tag: int = SIMULATION_TAG) -> CounterfactualResult:
    """Re-simulate the base log's users under ``policy`` with ``params`` as the demand model.

    Users keep their pre-panel histories and get per-user random streams
    keyed by user id; page sizes follow the base layout.  Engagement and
    shares are model-implied (average choice probabilities over simulated
    user-days).  :class:`ReplayPolicy` evaluates the realized pages and
    histories instead.
    """
    if base.n_events == 0:
        raise ValueError("base log is empty")
    if base.n_goods != params.n_goods:
        raise ValueError("base log and parameters disagree on the number of goods")
    if isinstance(policy, ReplayPolicy):
        shares = mean_probabilities(base, params)
        return CounterfactualResult(1.0 - shares[-1], shares, diversity_metrics(shares[:-1]), base)
    users = base.unique_users()
    horizon = int(base.days.max()) + 1 if horizon is None else int(horizon)
    log, prob_sum = run_users(params, base.layout, users, users, horizon, policy, seed_from(rng),
                              tag, prior=_prior_matrix(base, users), return_expected=True)
    shares = prob_sum / max(log.n_events, 1)
    return CounterfactualResult(1.0 - shares[-1], shares, diversity_metrics(shares[:-1]), log)


def compare_policies(results: dict[str, CounterfactualResult], reference: str = "current") -> list[dict]:
    """Percent changes in engagement, Gini and HHI relative to ``reference``."""
    if reference not in results:
        raise KeyError(f"reference policy {reference!r} missing")
    ref = results[reference]
    rows = []
    for name, r in results.items():
        rows.append({
            "policy": name,
            "engagement": r.engagement,
            "gini": r.diversity.gini,
            "hhi": r.diversity.hhi,
            "d_engagement_pct": 100.0 * (r.engagement / ref.engagement - 1.0),
            "d_gini_pct": 100.0 * (r.diversity.gini / ref.diversity.gini - 1.0),
            "d_hhi_pct": 100.0 * (r.diversity.hhi / ref.diversity.hhi - 1.0),
        })
    return rows


# -- decomposition -------------------------------------------------------------

@dataclasses.dataclass(frozen=True)
class DecompositionRecord:
    good: int
    y0: float  # mean P_j without j on the page over the population
    y1: float  # mean P_j with j on the page over the population
    y0_targeted: float
    y1_targeted: float
    n_targeted: int
    n_population: int = 0  # user-days behind y0 and y1

    @property
    def ate(self) -> float:
        return self.y1 - self.y0

    @property
    def att(self) -> float:
        return self.y1_targeted - self.y0_targeted

    @property
    def selection(self) -> float:
        return self.y0_targeted - self.y0

    @property
    def exposure(self) -> float:
        return self.ate

    @property
    def targeting(self) -> float:
        return self.att - self.ate

    @property
    def total(self) -> float:
        return self.y1_targeted - self.y0


class UndefinedTargetingError(ValueError):
    """The good never appears on a page, so its targeted mean is undefined."""


def _placebo_positions(pages: np.ndarray, n_placebo: int, rng) -> tuple[np.ndarray, np.ndarray]:
    n, K = pages.shape
    draw = np.where(pages >= 0, rng.random((n, K)), -1.0)
    take = min(n_placebo, K)
    pos = np.argsort(-draw, axis=1, kind="stable")[:, :take]
    valid = np.take_along_axis(pages, pos, axis=1) >= 0
    return pos, valid


def _decomposition_sums(params, log, states, goods, n_placebo, rng, population):
    J = params.n_goods
    slot_of = log.layout.slot_of_position
    G = goods.size
    # y0, y1, y0 targeted, y1 targeted, n targeted, n population
    sums = np.zeros((6, G))
    exp_beta = np.exp(params.beta[goods])  # (G, S)
    watched = log.watched_mask() if population == "eligible" else None
    for sl in _chunks(log.n_events):
        pages = log.pages[sl]
        A = states[sl]
        n = A.shape[0]
        rows = np.arange(n)
        U = A @ params.B.T
        bonus = core.page_bonus(pages, params.beta, log.layout)
        m = np.maximum((U + bonus).max(axis=1), 0.0)
        e_all = np.exp(U - m[:, None])
        eb_all = e_all * np.exp(bonus)
        Z = eb_all.sum(axis=1) + np.exp(-m)
        e, eb = e_all[:, goods], eb_all[:, goods]
        onpage = np.zeros((n, J), dtype=bool)
        pr, pk = np.nonzero(pages >= 0)
        onpage[pr, pages[pr, pk]] = True
        onpage = onpage[:, goods]
        # j on the page: remove j's bonus for Y(0)
        y1_on = eb / Z[:, None]
        y0_on = e / (Z[:, None] - eb + e)
        # j absent: average over placebo positions, Y(1) puts j in the slot of the
        # displaced good and Y(0) only strips that good's bonus
        pos, valid = _placebo_positions(pages, n_placebo, rng)
        y0_off = np.zeros((n, G))
        y1_off = np.zeros((n, G))
        count = valid.sum(axis=1)
        for p in range(pos.shape[1]):
            ok = valid[:, p]
            k = pos[:, p]
            mg = np.where(ok, pages[rows, k], 0)
            Zk = Z - np.where(ok, eb_all[rows, mg] - e_all[rows, mg], 0.0)
            ebj = e * exp_beta[:, slot_of[k]].T
            y0_off += np.where(ok[:, None], e / Zk[:, None], 0.0)
            y1_off += np.where(ok[:, None], ebj / (Zk[:, None] - e + ebj), 0.0)
        empty = count == 0
        plain = e / Z[:, None]
        y0_off = np.where(empty[:, None], plain, y0_off / np.maximum(count, 1)[:, None])
        y1_off = np.where(empty[:, None], plain, y1_off / np.maximum(count, 1)[:, None])
        y0 = np.where(onpage, y0_on, y0_off)
        y1 = np.where(onpage, y1_on, y1_off)
        inpop = onpage | ~watched[sl][:, goods] if watched is not None else np.ones_like(onpage)
        sums[0] += np.where(inpop, y0, 0.0).sum(axis=0)
        sums[1] += np.where(inpop, y1, 0.0).sum(axis=0)
        sums[2] += np.where(onpage, y0, 0.0).sum(axis=0)
        sums[3] += np.where(onpage, y1, 0.0).sum(axis=0)
        sums[4] += onpage.sum(axis=0)
        sums[5] += inpop.sum(axis=0)
    return sums


def decompose_goods(params: ModelParameters, log: InteractionLog, goods: Iterable[int] | None = None,
                    n_placebo: int = 10, rng=None, population: str = "eligible"
                    ) -> tuple[list[DecompositionRecord], list[int]]:
    """Decomposition records for ``goods`` (default: all); returns (records, never_recommended).

    Untargeted means run over ``population``: ``eligible`` counts only
    user-days on which the good could be recommended (not yet watched, or
    on the page), ``all`` counts every user-day.
    """
    if n_placebo < 1:
        raise ValueError("n_placebo must be >= 1")
    if population not in ("eligible", "all"):
        raise ValueError(f"unknown population {population!r}")
    if log.n_events == 0:
        raise ValueError("log is empty")
    J = params.n_goods
    goods = np.arange(J) if goods is None else np.asarray(list(goods), dtype=np.int64)
    if goods.size and (goods.min() < 0 or goods.max() >= J):
        raise KeyError("goods outside the catalog")
    rng = as_generator(rng)
    states = core.log_states(log, params)
    sums = _decomposition_sums(params, log, states, goods, n_placebo, rng, population)
    records, skipped = [], []
    for i, j in enumerate(goods.tolist()):
        nt, n = int(sums[4, i]), int(sums[5, i])
        if nt == 0:
            skipped.append(j)
            continue
        records.append(DecompositionRecord(j, sums[0, i] / n, sums[1, i] / n,
                                           sums[2, i] / nt, sums[3, i] / nt, nt, n))
    return records, skipped


def decompose_good(params: ModelParameters, log: InteractionLog, good: int, n_placebo: int = 10,
                   rng=None, population: str = "eligible") -> DecompositionRecord:
    records, skipped = decompose_goods(params, log, [good], n_placebo, rng, population)
    if skipped:
        raise UndefinedTargetingError(f"good {good} is never recommended in the log")
    return records[0]


def aggregate_decomposition(records: Sequence[DecompositionRecord],
                            weights: str = "observation") -> tuple[float, float, float]:
    """Shares of (selection, exposure, targeting) across goods.

    ``mean`` and ``median`` combine the components across goods, ``observation``
    weights each good by its number of targeted user-days; the three combined
    components are then normalized by their sum.
    """
    if not records:
        raise ValueError("no decomposition records")
    C = np.array([[r.selection, r.exposure, r.targeting] for r in records])
    if weights == "mean":
        agg = C.mean(axis=0)
    elif weights == "median":
        agg = np.median(C, axis=0)
    elif weights == "observation":
        w = np.array([r.n_targeted for r in records], dtype=np.float64)
        agg = w @ C / w.sum()
    else:
        raise ValueError(f"unknown weighting {weights!r}")
    total = agg.sum()
    if total == 0 or not np.isfinite(total):
        raise ValueError("decomposition components sum to zero")
    return tuple(float(x) for x in agg / total)


@dataclasses.dataclass
class TargetingSummary:
    goods: np.ndarray
    targeting: np.ndarray
    tercile: np.ndarray  # 0 least popular .. 2 most popular
    category: np.ndarray
    tercile_mean: np.ndarray
    tercile_count: np.ndarray
    category_mean: dict[int, float]
    category_count: dict[int, int]

    def rows(self) -> list[tuple[int, float, int, int]]:
        return list(zip(self.goods.tolist(), self.targeting.tolist(), self.tercile.tolist(),
                        self.category.tolist()))


def popularity_terciles(popularity: np.ndarray) -> np.ndarray:
    ranks = np.argsort(np.argsort(popularity, kind="stable"), kind="stable")
    return np.minimum(3 * ranks // max(popularity.size, 1), 2)


def targeting_heterogeneity(records: Sequence[DecompositionRecord], popularity,
                            categories) -> TargetingSummary:
    """R_j grouped by baseline-popularity tercile (among recorded goods) and category."""
    popularity = np.asarray(popularity, dtype=np.float64)
    categories = np.asarray(categories, dtype=np.int64)
    goods = np.array([r.good for r in records], dtype=np.int64)
    if goods.size and goods.max() >= min(popularity.size, categories.size):
        raise ValueError("covariates do not cover every recorded good")
    R = np.array([r.targeting for r in records], dtype=np.float64)
    terc = popularity_terciles(popularity[goods])
    cat = categories[goods]
    t_count = np.bincount(terc, minlength=3)
    t_mean = np.bincount(terc, weights=R, minlength=3) / np.maximum(t_count, 1)
    t_mean[t_count == 0] = np.nan
    c_mean, c_count = {}, {}
    for c in np.unique(cat).tolist():
        sel = cat == c
        c_mean[c] = float(R[sel].mean())
        c_count[c] = int(sel.sum())
    return TargetingSummary(goods, R, terc, cat, t_mean, t_count, c_mean, c_count)


# -- imputation and incrementality --------------------------------------------------

def impute_recs_utility(params: ModelParameters, state, excluded, n_slots: int, rng=None) -> list[int]:
    """Softmax sampling of ``n_slots`` distinct goods on predicted utility, skipping ``excluded``."""
    rng = as_generator(rng)
    state = np.asarray(state, dtype=np.float64)
    if state.shape != (params.dim,):
        raise ValueError(f"state has shape {state.shape}, expected ({params.dim},)")
    allowed = np.ones(params.n_goods, dtype=bool)
    excluded = [int(g) for g in excluded]
    if any(not 0 <= g < params.n_goods for g in excluded):
        raise KeyError("excluded goods outside the catalog")
    allowed[excluded] = False
    if n_slots < 0 or n_slots > allowed.sum():
        raise ValueError(f"cannot fill {n_slots} slots from {int(allowed.sum())} permissible goods")
    u = params.B @ state
    picks = []
    for _ in range(n_slots):
        w = np.where(allowed, np.exp(u - u[allowed].max()), 0.0)
        j = int(rng.choice(params.n_goods, p=w / w.sum()))
        picks.append(j)
        allowed[j] = False
    return picks


@dataclasses.dataclass(frozen=True)
class IncrementalityResult:
    mode: str
    targets: tuple[int, ...]
    delta: float  # summed over user-days
    engagement_with: float  # per user-day, catalog including the targets
    engagement_without: float
    n_user_days: int

    @property
    def delta_per_user_day(self) -> float:
        return self.delta / max(self.n_user_days, 1)


def extend_parameters(params: ModelParameters, new_B: np.ndarray,
                      new_beta: np.ndarray | None = None) -> ModelParameters:
    """Append goods with given embeddings; bonuses default to the per-slot mean."""
    new_B = np.atleast_2d(np.asarray(new_B, dtype=np.float64))
    if new_B.shape[1] != params.dim:
        raise ValueError(f"new embeddings have dimension {new_B.shape[1]}, expected {params.dim}")
    if new_beta is None:
        new_beta = np.repeat(params.beta.mean(axis=0, keepdims=True), new_B.shape[0], axis=0)
    return dataclasses.replace(params, B=np.vstack([params.B, new_B]),
                               beta=np.vstack([params.beta, new_beta]))


def _engagement_sums(params, log, states, keep_with, keep_without, rng):
    """Summed engagement over log events with two catalogs sharing sampling noise."""
    J = params.n_goods
    width = log.layout.total
    watched = log.watched_mask()
    if watched.shape[1] < J:
        watched = np.pad(watched, ((0, 0), (0, J - watched.shape[1])))
    totals = np.zeros(2)
    for sl in _chunks(log.n_events):
        A = states[sl]
        U = A @ params.B.T
        keys = U + rng.gumbel(size=U.shape)
        for i, keep in enumerate((keep_with, keep_without)):
            eligible = keep[None, :] & ~watched[sl]
            pages = np.argsort(-np.where(eligible, keys, -np.inf), axis=1, kind="stable")[:, :width]
            ok = np.take_along_axis(eligible, pages, axis=1)
            pages = np.where(ok, pages, -1)
            Ui = np.where(keep[None, :], U + core.page_bonus(pages, params.beta, log.layout), -np.inf)
            totals[i] += core.engagement(core.choice_probs(Ui)).sum()
    return totals


def incrementality(params: ModelParameters, targets, mode: str, log: InteractionLog, rng=None,
                   new_embeddings: np.ndarray | None = None,
                   new_beta: np.ndarray | None = None) -> IncrementalityResult:
    """Engagement attributable to ``targets`` on the log's user-days.

    ``Existing``: catalog with vs without the target goods (indices).
    ``New``: catalog plus goods with embeddings ``new_embeddings`` (rows in
    target order) vs the current catalog.  Pages in both catalogs are
    re-drawn by utility-based softmax imputation with shared perturbations;
    user histories are the realized ones.
    """
    rng = as_generator(rng)
    mode = mode.lower()
    J = params.n_goods
    if log.n_events == 0:
        raise ValueError("log is empty")
    states = core.log_states(log, params)
    if mode == "existing":
        targets = np.unique(np.asarray(list(targets), dtype=np.int64))
        if targets.size and (targets.min() < 0 or targets.max() >= J):
            raise KeyError("target goods outside the catalog")
        if targets.size == J:
            raise ValueError("cannot remove the entire catalog")
        keep_without = np.ones(J, dtype=bool)
        keep_without[targets] = False
        model = params
        keep_with = np.ones(J, dtype=bool)
    elif mode == "new":
        if new_embeddings is None:
            raise ValueError("new goods need exogenous embeddings")
        new_embeddings = np.atleast_2d(new_embeddings)
        targets = np.asarray(list(targets), dtype=np.int64)
        if targets.size != new_embeddings.shape[0]:
            raise ValueError("one embedding row per new good is required")
        model = extend_parameters(params, new_embeddings, new_beta)
        keep_with = np.ones(model.n_goods, dtype=bool)
        keep_without = np.arange(model.n_goods) < J
    else:
        raise ValueError(f"unknown mode {mode!r}; expected Existing or New")
    if targets.size == 0:
        eng = _engagement_sums(model, log, states, keep_with, keep_with, rng)[0]
        eng = float(eng / log.n_events)
        return IncrementalityResult(mode, (), 0.0, eng, eng, log.n_events)
    with_sum, without_sum = _engagement_sums(model, log, states, keep_with, keep_without, rng)
    return IncrementalityResult(mode, tuple(targets.tolist()), float(with_sum - without_sum),
                                float(with_sum / log.n_events), float(without_sum / log.n_events),
                                log.n_events)


def removal_diversion(params: ModelParameters, log: InteractionLog, goods=None) -> np.ndarray:
    """Second-choice diversion when a good leaves the catalog, realized pages held fixed.

    Row ``i`` holds D_{goods[i] -> k} for k over (goods..., outside); the
    entry for the removed good itself is NaN.  Within a user-day the logit
    reallocates P_j in proportion to the other goods' probabilities.
    """
    J = params.n_goods
    goods = np.arange(J) if goods is None else np.asarray(list(goods), dtype=np.int64)
    states = core.log_states(log, params)
    num = np.zeros((goods.size, J + 1))
    mass = np.zeros(goods.size)
    for sl in _chunks(log.n_events):
        P = core.choice_probs(core.utilities(states[sl], params, log.pages[sl], log.layout))
        Pj = P[:, goods]
        num += (Pj / (1.0 - Pj)).T @ P
        mass += Pj.sum(axis=0)
    D = num / mass[:, None]
    D[np.arange(goods.size), goods] = np.nan
    return D
