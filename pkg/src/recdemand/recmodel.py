"""Recommendation model: predicts which goods the platform puts on a user's page.

Each good is on the page independently with probability
sigmoid(A_it . B_j + b_j), where A_it comes from the same attention sequence
model as the demand side (with its own weights).  Goods the user has already
watched are never recommended, so they are left out of the likelihood.
"""
from __future__ import annotations

import dataclasses

import numpy as np
from scipy.special import expit, log_expit
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import core
from .estimation import TrainingConfig, check_gradient, sgd_ascent
from .params import ArrayBundle, SequenceWeights, random_like
from .types import InteractionLog
from .utils import as_generator


@dataclasses.dataclass
class RecModel(ArrayBundle):
    B: np.ndarray  # (J, d)
    bias: np.ndarray  # (J,)
    default_state: np.ndarray  # (d,)
    seq: SequenceWeights

    @property
    def n_goods(self) -> int:
        return self.B.shape[0]

    @property
    def max_len(self) -> int:
        return self.seq.max_len

    def validate(self) -> "RecModel":
        J, d = self.B.shape
        if self.bias.shape != (J,) or self.default_state.shape != (d,):
            raise ValueError("recommendation model shapes are inconsistent")
        self.seq.validate(d)
        if not self.all_finite():
            raise ValueError("recommendation model contains non-finite entries")
        return self

    @classmethod
    def zeros(cls, n_goods: int, dim: int, max_len: int = 10, hidden: int = 16) -> "RecModel":
        return cls(np.zeros((n_goods, dim)), np.zeros(n_goods), np.zeros(dim),
                   SequenceWeights.zeros(dim, max_len, hidden))

    def states(self, H: np.ndarray, lengths: np.ndarray) -> np.ndarray:
        H = H[:, : self.max_len]
        return core.encode_states(H, np.minimum(lengths, H.shape[1]), self.B, self.seq,
                                  self.default_state)

    def logits_from_histories(self, H: np.ndarray, lengths: np.ndarray) -> np.ndarray:
        return self.states(H, lengths) @ self.B.T + self.bias

    def logits(self, log: InteractionLog) -> np.ndarray:
        H, lengths = log.histories(self.max_len)
        return self.logits_from_histories(H, lengths)

    def predict_proba(self, log: InteractionLog) -> np.ndarray:
        """(n_events, J) probability that each good is on the page."""
        return expit(self.logits(log))


@dataclasses.dataclass
class RecBatch:
    H: np.ndarray
    lengths: np.ndarray
    Y: np.ndarray  # (N, J) 1 if on the page
    M: np.ndarray  # (N, J) 1 if the good counts in the likelihood

    @classmethod
    def from_log(cls, log: InteractionLog, max_len: int, mask_watched: bool = True) -> "RecBatch":
        H, lengths = log.histories(max_len)
        Y = np.zeros((log.n_events, log.n_goods))
        rows, pos = np.nonzero(log.pages >= 0)
        Y[rows, log.pages[rows, pos]] = 1.0
        M = (~log.watched_mask()).astype(np.float64) if mask_watched else np.ones_like(Y)
        return cls(H, lengths, Y, M)

    def take(self, idx) -> "RecBatch":
        return RecBatch(self.H[idx], self.lengths[idx], self.Y[idx], self.M[idx])

    def __len__(self) -> int:
        return int(self.Y.shape[0])


def rec_batch_gradient(batch: RecBatch, model: RecModel, l2: float = 0.0):
    """Value and gradient of the masked Bernoulli log-likelihood minus ``l2 * ||model||^2``."""
    l2_value = l2 * model.sqnorm() if l2 else 0.0
    if len(batch) == 0:
        grad = model.zeros_like() if not l2 else model.scale(-2.0 * l2)
        return -l2_value, grad
    A, cache = core.encode_states(batch.H, batch.lengths, model.B, model.seq,
                                  model.default_state, return_cache=True)
    Z = A @ model.B.T + model.bias
    ll = float(np.sum(batch.M * (batch.Y * log_expit(Z) + (1 - batch.Y) * log_expit(-Z))))
    dZ = batch.M * (batch.Y - expit(Z))
    dB = dZ.T @ A
    dA = dZ @ model.B
    dB_seq, dseq, d_default = core.backprop_states(dA, cache, model.seq, model.n_goods)
    grad = RecModel(dB + dB_seq, dZ.sum(axis=0), d_default, dseq)
    if l2:
        grad = grad - model.scale(2.0 * l2)
    return ll - l2_value, grad


def init_rec_model(n_goods: int, config: TrainingConfig, rng=None) -> RecModel:
    rng = as_generator(config.seed if rng is None else rng)
    template = RecModel.zeros(n_goods, config.embedding_dim, config.max_len, config.hidden)
    return random_like(template, config.init_scale, rng)


def fit_rec_model(log: InteractionLog, config: TrainingConfig | None = None,
                  init: RecModel | None = None, mask_watched: bool = True):
    """Maximize the per-good Bernoulli likelihood of page membership."""
    config = (config or TrainingConfig()).validate()
    if log.n_events == 0:
        raise ValueError("cannot fit a recommendation model on an empty log")
    if not (log.pages >= 0).any():
        raise ValueError("log contains no recommendations")
    model = init.copy() if init is not None else init_rec_model(log.n_goods, config)
    model.validate()
    batch = RecBatch.from_log(log, model.max_len, mask_watched)

    def objective(idx, m):
        return rec_batch_gradient(batch.take(idx), m, config.l2_penalty * len(idx))

    return sgd_ascent(model, objective, len(batch), config)


def rec_gradient_check(model: RecModel, batch: RecBatch, step: float = 1e-5, l2: float = 0.0,
                       n_coords: int | None = 60, rng=None) -> float:
    return check_gradient(lambda m: rec_batch_gradient(batch, m, l2), model, step, n_coords, rng)


class RecommendationModel(BaseEstimator):
    """Estimator wrapper around :func:`fit_rec_model`."""

    def __init__(self, embedding_dim=8, hidden=16, learning_rate=0.01, batch_size=256, epochs=5,
                 l2_penalty=1e-6, seed=0, max_len=10, init_scale=0.1, optimizer="adam",
                 mask_watched=True):
        self.embedding_dim = embedding_dim
        self.hidden = hidden
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.epochs = epochs
        self.l2_penalty = l2_penalty
        self.seed = seed
        self.max_len = max_len
        self.init_scale = init_scale
        self.optimizer = optimizer
        self.mask_watched = mask_watched

    def fit(self, log: InteractionLog, y=None):
        config = TrainingConfig(embedding_dim=self.embedding_dim, hidden=self.hidden,
                                learning_rate=self.learning_rate, batch_size=self.batch_size,
                                epochs=self.epochs, l2_penalty=self.l2_penalty, seed=self.seed,
                                max_len=self.max_len, init_scale=self.init_scale,
                                optimizer=self.optimizer, holdout="none")
        self.model_, self.report_ = fit_rec_model(log, config, mask_watched=self.mask_watched)
        return self

    def predict_proba(self, log: InteractionLog) -> np.ndarray:
        check_is_fitted(self, "model_")
        return self.model_.predict_proba(log)
