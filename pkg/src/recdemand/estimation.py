"""Mini-batch stochastic-gradient maximum likelihood for the demand model."""
from __future__ import annotations

import dataclasses
import logging
import time
from typing import Callable

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import core
from .params import ArrayBundle, Gradient, ModelParameters, SequenceWeights, random_like
from .types import Catalog, InteractionLog, SlotLayout
from .utils import as_generator, fit_r2

logger = logging.getLogger(__name__)


class FitDivergedError(FloatingPointError):
    """Training produced a non-finite loss or gradient."""


@dataclasses.dataclass
class TrainingConfig:
    embedding_dim: int = 8
    hidden: int = 16
    learning_rate: float = 0.05
    lr_decay: float = 1.0
    batch_size: int = 256
    epochs: int = 10
    l2_penalty: float = 1e-6
    seed: int = 0
    max_len: int = 10
    slot_count: int = 3
    init_scale: float = 0.1
    optimizer: str = "sgd"
    momentum: float = 0.9
    holdout: str = "last_day"
    beta_pooling: float = 0.0

    def validate(self) -> "TrainingConfig":
        for name in ("embedding_dim", "hidden", "batch_size", "max_len", "slot_count"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if min(self.learning_rate, self.l2_penalty, self.init_scale, self.beta_pooling) < 0:
            raise ValueError("learning_rate, l2_penalty, init_scale and beta_pooling must be >= 0")
        if not 0 < self.lr_decay <= 1:
            raise ValueError("lr_decay must lie in (0, 1]")
        if self.optimizer not in ("sgd", "momentum", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.holdout not in ("last_day", "none"):
            raise ValueError(f"unknown holdout rule {self.holdout!r}")
        return self


@dataclasses.dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    train_loss_smoothed: float
    holdout_loss: float
    seconds: float


@dataclasses.dataclass
class FitReport:
    epochs: list[EpochRecord] = dataclasses.field(default_factory=list)
    holdout_loss: float = float("nan")
    share_fit: dict | None = None

    @property
    def train_losses(self) -> list[float]:
        return [e.train_loss for e in self.epochs]


@dataclasses.dataclass
class EventBatch:
    """Precomputed model inputs for a set of events."""

    H: np.ndarray
    lengths: np.ndarray
    pages: np.ndarray
    choices: np.ndarray
    layout: SlotLayout
    users: np.ndarray
    days: np.ndarray

    @classmethod
    def from_log(cls, log: InteractionLog, max_len: int, index=None) -> "EventBatch":
        H, lengths = log.histories(max_len)
        batch = cls(H, lengths, log.pages, log.choices, log.layout, log.users, log.days)
        return batch if index is None else batch.take(index)

    def take(self, index) -> "EventBatch":
        return EventBatch(self.H[index], self.lengths[index], self.pages[index],
                          self.choices[index], self.layout, self.users[index], self.days[index])

    def __len__(self) -> int:
        return int(self.choices.shape[0])


def init_parameters(catalog: Catalog, config: TrainingConfig, rng=None) -> ModelParameters:
    rng = as_generator(config.seed if rng is None else rng)
    template = ModelParameters.zeros(len(catalog), config.embedding_dim, config.slot_count,
                                     config.max_len, config.hidden)
    return random_like(template, config.init_scale, rng)


def _as_batch(batch, max_len: int) -> EventBatch:
    if isinstance(batch, EventBatch):
        return batch
    if isinstance(batch, InteractionLog):
        return EventBatch.from_log(batch, max_len)
    raise TypeError("batch must be an EventBatch or an InteractionLog")


def _raise_nonfinite(batch: EventBatch, bad: np.ndarray, what: str):
    idx = np.flatnonzero(bad)[:5]
    where = ", ".join(f"(user={batch.users[i]}, day={batch.days[i]})" for i in idx)
    raise FitDivergedError(f"non-finite {what} at events {where}")


def utility_backward(dU: np.ndarray, A: np.ndarray, params, batch: EventBatch):
    """Gradients of a scalar w.r.t. B, beta and A given dU = d/dU (N, J)."""
    dB = dU.T @ A
    dA = dU @ params.B
    rows, pos = np.nonzero(batch.pages >= 0)
    goods = batch.pages[rows, pos]
    slots = batch.layout.slot_of_position[pos]
    S = params.beta.shape[1]
    flat = np.bincount(goods * S + slots, weights=dU[rows, goods],
                       minlength=params.beta.shape[0] * S)
    return dB, flat.reshape(params.beta.shape), dA


def batch_gradient(batch, params: ModelParameters, l2: float = 0.0) -> tuple[float, Gradient]:
    """Value and exact gradient of ``sum log P(choice) - l2 * ||params||^2`` over a batch."""
    batch = _as_batch(batch, params.max_len)
    J = params.n_goods
    l2_value = l2 * params.sqnorm() if l2 else 0.0
    if len(batch) == 0:
        grad = params.zeros_like() if not l2 else params.scale(-2.0 * l2)
        return -l2_value, grad
    A, cache = core.encode_states(batch.H, batch.lengths, params.B, params.seq,
                                  params.default_state, return_cache=True)
    U = core.utilities(A, params, batch.pages, batch.layout)
    finite = np.isfinite(U).all(axis=1)
    if not finite.all():
        _raise_nonfinite(batch, ~finite, "utility")
    logP = core.log_choice_probs(U)
    n = len(batch)
    ll = float(logP[np.arange(n), batch.choices].sum())
    P = np.exp(logP[:, :J])
    dU = -P
    inside = batch.choices >= 0
    dU[np.flatnonzero(inside), batch.choices[inside]] += 1.0
    dB, dbeta, dA = utility_backward(dU, A, params, batch)
    dB_seq, dseq, d_default = core.backprop_states(dA, cache, params.seq, J)
    grad = ModelParameters(dB + dB_seq, dbeta, d_default, dseq)
    if l2:
        grad = grad - params.scale(2.0 * l2)
    return ll - l2_value, grad


def beta_pooling_penalty(beta: np.ndarray, strength: float) -> tuple[float, np.ndarray]:
    """``strength * sum_jr (beta_jr - mean_j beta_jr)^2`` and its gradient.

    Shrinks each good's bonuses toward the slot means across goods, which
    keeps rarely chosen goods from taking arbitrary bonuses.
    """
    dev = beta - beta.mean(axis=0, keepdims=True)
    return float(strength * np.sum(dev * dev)), 2.0 * strength * dev


# -- optimizers ---------------------------------------------------------------

class _Optimizer:
    def __init__(self, kind: str, momentum: float = 0.9):
        self.kind = kind
        self.momentum = momentum
        self.state = None
        self.t = 0

    def step(self, params: ArrayBundle, grad: ArrayBundle, lr: float) -> ArrayBundle:
        """Ascent step on the (mean) objective whose gradient is ``grad``."""
        self.t += 1
        if self.kind == "sgd":
            return params + grad.scale(lr)
        if self.kind == "momentum":
            self.state = grad if self.state is None else self.state.scale(self.momentum) + grad
            return params + self.state.scale(lr)
        b1, b2, eps = 0.9, 0.999, 1e-8
        if self.state is None:
            self.state = (grad.zeros_like(), grad.zeros_like())
        m, v = self.state
        m = m.scale(b1) + grad.scale(1 - b1)
        v = v.scale(b2) + grad.map(np.square).scale(1 - b2)
        self.state = (m, v)
        c1 = 1 - b1 ** self.t
        c2 = 1 - b2 ** self.t
        step = m.combine(v, lambda mm, vv: (mm / c1) / (np.sqrt(vv / c2) + eps))
        return params + step.scale(lr)


def sgd_ascent(params: ArrayBundle, objective: Callable, n_items: int, config: TrainingConfig,
               evaluate: Callable | None = None, report: FitReport | None = None,
               freeze: Callable | None = None):
    """Generic seeded mini-batch ascent loop.

    ``objective(index, params)`` returns ``(value, grad)`` summed over the events
    in ``index``.  Losses are reported as mean negative values per event.
    ``freeze(grad)`` may zero out gradient leaves that must stay fixed.
    """
    rng = np.random.default_rng(config.seed)
    opt = _Optimizer(config.optimizer, config.momentum)
    report = report if report is not None else FitReport()
    best = float("inf")
    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        lr = config.learning_rate * config.lr_decay ** epoch
        order = rng.permutation(n_items)
        total = 0.0
        for lo in range(0, n_items, config.batch_size):
            idx = np.sort(order[lo:lo + config.batch_size])
            value, grad = objective(idx, params)
            if not np.isfinite(value) or not grad.all_finite():
                raise FitDivergedError(
                    f"divergence in epoch {epoch} at batch starting {lo}: objective={value}")
            if freeze is not None:
                grad = freeze(grad)
            total += value
            if lr > 0:
                params = opt.step(params, grad.scale(1.0 / len(idx)), lr)
        train_loss = -total / max(n_items, 1)
        best = min(best, train_loss)
        holdout = evaluate(params) if evaluate is not None else float("nan")
        seconds = time.perf_counter() - t0
        logger.info("epoch %d train %.6f holdout %.6f (%.1fs)", epoch, train_loss, holdout, seconds)
        report.epochs.append(EpochRecord(epoch, train_loss, best, holdout, seconds))
    return params, report


def split_holdout(log: InteractionLog, rule: str = "last_day") -> tuple[np.ndarray, np.ndarray]:
    """Boolean masks (train, holdout); ``last_day`` holds out each user's final event."""
    n = log.n_events
    hold = np.zeros(n, dtype=bool)
    if rule == "last_day" and n:
        last = np.ones(n, dtype=bool)
        last[:-1] = log.users[1:] != log.users[:-1]
        # keep users with a single event in training
        first = np.ones(n, dtype=bool)
        first[1:] = log.users[1:] != log.users[:-1]
        hold = last & ~first
    return ~hold, hold


def mean_log_loss(batch: EventBatch, params: ModelParameters) -> float:
    if len(batch) == 0:
        return float("nan")
    total = 0.0
    for lo in range(0, len(batch), 20000):
        ll, _ = _loglik_only(batch.take(slice(lo, lo + 20000)), params)
        total += ll
    return -total / len(batch)


def _loglik_only(batch: EventBatch, params: ModelParameters):
    A = core.encode_states(batch.H, batch.lengths, params.B, params.seq, params.default_state)
    logP = core.log_choice_probs(core.utilities(A, params, batch.pages, batch.layout))
    return float(logP[np.arange(len(batch)), batch.choices].sum()), None


def fit(log: InteractionLog, config: TrainingConfig, init: ModelParameters | None = None,
        catalog: Catalog | None = None) -> tuple[ModelParameters, FitReport]:
    config.validate()
    if log.n_events == 0:
        raise ValueError("cannot fit on an empty log")
    if log.layout.n_slots != config.slot_count:
        raise ValueError(f"log has {log.layout.n_slots} slots, config expects {config.slot_count}")
    catalog = catalog or Catalog.range(log.n_goods, config.embedding_dim)
    params = init.copy() if init is not None else init_parameters(catalog, config)
    params.validate()
    batch = EventBatch.from_log(log, params.max_len)
    train_mask, hold_mask = split_holdout(log, config.holdout)
    train = batch.take(train_mask)
    hold = batch.take(hold_mask)

    def objective(idx, p):
        value, grad = batch_gradient(train.take(idx), p, config.l2_penalty * len(idx))
        if config.beta_pooling:
            pv, pg = beta_pooling_penalty(p.beta, config.beta_pooling * len(idx) / len(train))
            value -= pv
            grad.beta -= pg
        return value, grad

    evaluate = (lambda p: mean_log_loss(hold, p)) if len(hold) else None
    params, report = sgd_ascent(params, objective, len(train), config, evaluate)
    report.holdout_loss = mean_log_loss(hold, params) if len(hold) else float("nan")
    return params, report


# -- gradient validation ------------------------------------------------------

def check_gradient(fn: Callable, params: ArrayBundle, step: float = 1e-5, n_coords: int | None = 60,
                   rng=None, floor: float = 1e-6) -> float:
    """Max relative error between ``fn``'s analytic gradient and central differences.

    ``fn(params) -> (value, grad)``.  Coordinates are a random subset when
    ``n_coords`` is set.  Relative error is ``|a - f| / max(|a|, |f|, floor)``.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    rng = as_generator(rng)
    _, grad = fn(params)
    theta = params.ravel()
    analytic = grad.ravel()
    coords = np.arange(theta.size)
    if n_coords is not None and n_coords < theta.size:
        coords = np.sort(rng.choice(theta.size, n_coords, replace=False))
    worst = 0.0
    for k in coords:
        up = theta.copy()
        up[k] += step
        down = theta.copy()
        down[k] -= step
        fd = (fn(params.with_vector(up))[0] - fn(params.with_vector(down))[0]) / (2 * step)
        err = abs(analytic[k] - fd) / max(abs(analytic[k]), abs(fd), floor)
        worst = max(worst, err)
    return worst


def finite_difference_check(params: ModelParameters, batch, step: float = 1e-5, l2: float = 0.0,
                            n_coords: int | None = 60, rng=None) -> float:
    batch = _as_batch(batch, params.max_len)
    return check_gradient(lambda p: batch_gradient(batch, p, l2), params, step, n_coords, rng)


# -- diagnostics --------------------------------------------------------------

def holdout_metrics(params: ModelParameters, log: InteractionLog, events=None) -> dict:
    """Observed vs model-implied shares (realized pages held fixed) and log-loss.

    ``events`` (mask or index) restricts the evaluation to some events while
    user states still come from the full log, as in training.
    """
    probs = core.event_probabilities(log, params)
    choices = log.choices
    if events is not None:
        probs, choices = probs[events], choices[events]
    implied = probs.mean(axis=0)
    J = params.n_goods
    observed = np.bincount(np.where(choices < 0, J, choices), minlength=J + 1) / max(len(choices), 1)
    nonzero = observed[:J] > 0
    r2 = fit_r2(np.log(observed[:J][nonzero]), np.log(implied[:J][nonzero]))
    ll = probs[np.arange(len(choices)), choices]
    return {
        "observed_share": observed,
        "implied_share": implied,
        "log_share_r2": r2,
        "share_r2": fit_r2(observed[:J], implied[:J]),
        "zero_share_goods": np.flatnonzero(~nonzero),
        "log_loss": float(-np.mean(np.log(ll))),
        "observed_engagement": float(1.0 - observed[J]),
        "implied_engagement": float(1.0 - implied[J]),
        "n_events": int(len(choices)),
    }


# -- estimator ----------------------------------------------------------------

class DemandModel(BaseEstimator):
    """Recommendation-aware logit demand model with an attention user state.

    ``fit`` takes an :class:`~recdemand.types.InteractionLog`; predictions are
    per-event choice probabilities laid out as (goods..., outside).
    """

    def __init__(self, embedding_dim=8, hidden=16, learning_rate=0.05, lr_decay=1.0,
                 batch_size=256, epochs=10, l2_penalty=1e-6, seed=0, max_len=10,
                 init_scale=0.1, optimizer="sgd", momentum=0.9, holdout="last_day",
                 beta_pooling=0.0):
        self.embedding_dim = embedding_dim
        self.hidden = hidden
        self.learning_rate = learning_rate
        self.lr_decay = lr_decay
        self.batch_size = batch_size
        self.epochs = epochs
        self.l2_penalty = l2_penalty
        self.seed = seed
        self.max_len = max_len
        self.init_scale = init_scale
        self.optimizer = optimizer
        self.momentum = momentum
        self.holdout = holdout
        self.beta_pooling = beta_pooling

    def _config(self, slot_count: int) -> TrainingConfig:
        params = {f.name: getattr(self, f.name) for f in dataclasses.fields(TrainingConfig)
                  if f.name != "slot_count"}
        return TrainingConfig(slot_count=slot_count, **params)

    def fit(self, log: InteractionLog, y=None, init_params: ModelParameters | None = None):
        config = self._config(log.layout.n_slots)
        self.params_, self.report_ = fit(log, config, init=init_params)
        self.n_goods_ = log.n_goods
        return self

    def predict_proba(self, log: InteractionLog) -> np.ndarray:
        check_is_fitted(self, "params_")
        return core.event_probabilities(log, self.params_)

    def score(self, log: InteractionLog, y=None) -> float:
        """Mean log-likelihood per event."""
        check_is_fitted(self, "params_")
        return core.log_likelihood(log, self.params_) / max(log.n_events, 1)

    def share_fit(self, log: InteractionLog) -> dict:
        check_is_fitted(self, "params_")
        return holdout_metrics(self.params_, log)
