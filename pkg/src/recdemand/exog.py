"""Exogenous good embeddings.

Goods carry fixed raw vectors (e.g. content descriptors) that a small
two-layer network maps to the d-dimensional embedding used by the demand
model.  The raw vectors never change during training; the projection, the
recommendation bonuses and the sequence weights are learned jointly.  Goods
absent from the log but present in the table can then be scored.
"""
from __future__ import annotations

import dataclasses

import numpy as np
from scipy.stats import ortho_group
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import core
from .counterfactual import removal_diversion
from .estimation import (EventBatch, TrainingConfig, batch_gradient, beta_pooling_penalty,
                         check_gradient, init_parameters, mean_log_loss, sgd_ascent, split_holdout)
from .params import ArrayBundle, ModelParameters, SequenceWeights
from .types import Catalog, InteractionLog
from .utils import as_generator, corr_r2, fit_r2

ACTIVATIONS = ("tanh", "identity")


@dataclasses.dataclass
class ExogenousEmbeddingTable:
    goods: np.ndarray  # good indices; may extend past the current catalog
    vectors: np.ndarray  # (n, raw_dim)

    def __post_init__(self):
        self.goods = np.asarray(self.goods, dtype=np.int64).reshape(-1)
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        if self.vectors.ndim != 2 or self.vectors.shape[0] != self.goods.size:
            raise ValueError("need one raw vector per good")
        if np.unique(self.goods).size != self.goods.size:
            raise ValueError("duplicate goods in embedding table")
        if (self.goods < 0).any():
            raise ValueError("good indices must be nonnegative")
        if not np.isfinite(self.vectors).all():
            raise ValueError("embedding table contains non-finite entries")

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def __len__(self) -> int:
        return int(self.goods.size)

    def rows_for(self, goods) -> np.ndarray:
        goods = np.asarray(goods, dtype=np.int64).reshape(-1)
        lookup = {g: i for i, g in enumerate(self.goods.tolist())}
        missing = [g for g in goods.tolist() if g not in lookup]
        if missing:
            shown = ", ".join(str(g) for g in missing[:20])
            more = f" (+{len(missing) - 20} more)" if len(missing) > 20 else ""
            raise KeyError(f"no exogenous embedding for goods {shown}{more}")
        return self.vectors[[lookup[g] for g in goods.tolist()]]

    def catalog_matrix(self, n_goods: int) -> np.ndarray:
        return self.rows_for(np.arange(n_goods))


@dataclasses.dataclass
class ProjectionWeights(ArrayBundle):
    W1: np.ndarray  # (raw_dim, hidden)
    b1: np.ndarray
    W2: np.ndarray  # (hidden, d)
    b2: np.ndarray

    @property
    def raw_dim(self) -> int:
        return self.W1.shape[0]

    @property
    def out_dim(self) -> int:
        return self.W2.shape[1]

    def validate(self) -> "ProjectionWeights":
        D, h = self.W1.shape
        if self.b1.shape != (h,) or self.W2.shape[0] != h or self.b2.shape != (self.W2.shape[1],):
            raise ValueError("projection weight shapes are inconsistent")
        return self

    @classmethod
    def zeros(cls, raw_dim: int, hidden: int, dim: int) -> "ProjectionWeights":
        return cls(np.zeros((raw_dim, hidden)), np.zeros(hidden), np.zeros((hidden, dim)),
                   np.zeros(dim))

    @classmethod
    def identity(cls, dim: int) -> "ProjectionWeights":
        return cls(np.eye(dim), np.zeros(dim), np.eye(dim), np.zeros(dim))

    def absorb_input_map(self, center: np.ndarray, scale: float) -> "ProjectionWeights":
        """Weights acting on raw x that equal these weights acting on (x - center) / scale."""
        W1 = self.W1 / scale
        return ProjectionWeights(W1, self.b1 - center @ W1, self.W2.copy(), self.b2.copy())


def _activate(Z: np.ndarray, activation: str) -> np.ndarray:
    if activation == "tanh":
        return np.tanh(Z)
    if activation == "identity":
        return Z
    raise ValueError(f"unknown activation {activation!r}; expected one of {ACTIVATIONS}")


def project(raw, proj: ProjectionWeights, activation: str = "tanh") -> np.ndarray:
    """Map raw vectors (raw_dim,) or (n, raw_dim) to model embeddings."""
    raw = np.asarray(raw, dtype=np.float64)
    if raw.shape[-1] != proj.raw_dim:
        raise ValueError(f"raw vectors have dimension {raw.shape[-1]}, projection expects "
                         f"{proj.raw_dim}")
    hidden = _activate(raw @ proj.W1 + proj.b1, activation)
    return hidden @ proj.W2 + proj.b2


def project_backward(dOut: np.ndarray, raw: np.ndarray, proj: ProjectionWeights,
                     activation: str = "tanh") -> ProjectionWeights:
    """Gradient of sum(dOut * project(raw)) with respect to the projection weights."""
    hidden = _activate(raw @ proj.W1 + proj.b1, activation)
    dW2 = hidden.T @ dOut
    dH = dOut @ proj.W2.T
    if activation == "tanh":
        dH = dH * (1.0 - hidden * hidden)
    return ProjectionWeights(raw.T @ dH, dH.sum(axis=0), dW2, dOut.sum(axis=0))


@dataclasses.dataclass
class ExogenousWeights(ArrayBundle):
    """Trainable part of the exogenous model.

    ``B_free`` holds embeddings for goods outside the exogenous group (used
    in split-goods cross-validation); rows of exogenous goods are ignored.
    """

    proj: ProjectionWeights
    B_free: np.ndarray
    beta: np.ndarray
    default_state: np.ndarray
    seq: SequenceWeights


def assemble(weights: ExogenousWeights, raw: np.ndarray, exog_mask: np.ndarray,
             activation: str = "tanh") -> ModelParameters:
    """Demand parameters with exogenous goods' embeddings replaced by projections."""
    B = np.where(exog_mask[:, None], project(raw, weights.proj, activation), weights.B_free)
    return ModelParameters(B, weights.beta, weights.default_state, weights.seq)


def exogenous_gradient(batch: EventBatch, weights: ExogenousWeights, raw: np.ndarray,
                       exog_mask: np.ndarray, activation: str = "tanh", l2: float = 0.0):
    """Log-likelihood of ``batch`` minus ``l2 * ||weights||^2`` and its gradient."""
    params = assemble(weights, raw, exog_mask, activation)
    value, g = batch_gradient(batch, params, 0.0)
    m = exog_mask[:, None]
    dproj = project_backward(np.where(m, g.B, 0.0), raw, weights.proj, activation)
    grad = ExogenousWeights(dproj, np.where(m, 0.0, g.B), g.beta, g.default_state, g.seq)
    if l2:
        value -= l2 * weights.sqnorm()
        grad = grad - weights.scale(2.0 * l2)
    return value, grad


def exogenous_gradient_check(batch: EventBatch, weights: ExogenousWeights, raw: np.ndarray,
                             exog_mask: np.ndarray, activation: str = "tanh", step: float = 1e-5,
                             n_coords: int | None = 60, rng=None) -> float:
    fn = lambda w: exogenous_gradient(batch, w, raw, exog_mask, activation)
    return check_gradient(fn, weights, step, n_coords, rng)


def init_exogenous(n_goods: int, raw_dim: int, config: TrainingConfig, proj_hidden: int = 32,
                   rng=None, input_norm: float | None = None) -> ExogenousWeights:
    """Random initial weights; ``input_norm`` is the typical raw row norm (default sqrt(raw_dim))."""
    rng = as_generator(config.seed if rng is None else rng)
    base = init_parameters(Catalog.range(n_goods, config.embedding_dim), config, rng)
    input_norm = np.sqrt(raw_dim) if input_norm is None else input_norm
    proj = ProjectionWeights(rng.normal(0.0, 1.0 / input_norm, (raw_dim, proj_hidden)),
                             np.zeros(proj_hidden),
                             rng.normal(0.0, 1.0 / np.sqrt(proj_hidden),
                                        (proj_hidden, config.embedding_dim)),
                             np.zeros(config.embedding_dim))
    return ExogenousWeights(proj, base.B, base.beta, base.default_state, base.seq)


@dataclasses.dataclass
class ExogenousFit:
    weights: ExogenousWeights
    exog_mask: np.ndarray
    activation: str
    report: object

    @property
    def projection(self) -> ProjectionWeights:
        return self.weights.proj

    def parameters(self, raw: np.ndarray, all_exogenous: bool = False) -> ModelParameters:
        mask = np.ones_like(self.exog_mask) if all_exogenous else self.exog_mask
        return assemble(self.weights, raw, mask, self.activation)


def fit_exogenous(log: InteractionLog, table: ExogenousEmbeddingTable,
                  config: TrainingConfig | None = None, exog_goods=None, proj_hidden: int = 32,
                  activation: str = "tanh", init: ExogenousWeights | None = None,
                  freeze_projection: bool = False, normalize: bool = True):
    """Fit the demand model with table-driven embeddings.

    ``exog_goods`` (default: every catalog good) selects which goods use
    projected embeddings; the rest learn free embeddings.  With
    ``normalize`` the network trains on centered raw rows scaled to unit
    average norm and the map is folded into the returned first layer, so the
    projection always applies to raw vectors.  Returns
    ``(params, projection, fit)`` where ``params`` has B = project(table)
    for exogenous goods.
    """
    config = (config or TrainingConfig()).validate()
    if activation not in ACTIVATIONS:
        raise ValueError(f"unknown activation {activation!r}; expected one of {ACTIVATIONS}")
    if log.n_events == 0:
        raise ValueError("cannot fit on an empty log")
    J = log.n_goods
    raw_table = table.catalog_matrix(J)
    mask = np.ones(J, dtype=bool)
    if exog_goods is not None:
        mask[:] = False
        mask[np.asarray(list(exog_goods), dtype=np.int64)] = True
    if normalize:
        # train on centered rows of unit average norm; folded back into W1 at the end
        center = raw_table.mean(axis=0)
        scale = float(np.sqrt(np.mean(np.sum((raw_table - center) ** 2, axis=1)))) or 1.0
    else:
        center, scale = np.zeros(table.dim), 1.0
    raw = (raw_table - center) / scale
    if init is not None:
        weights = init.copy()
        weights.proj = dataclasses.replace(weights.proj, W1=weights.proj.W1 * scale,
                                           b1=weights.proj.b1 + center @ weights.proj.W1)
    else:
        weights = init_exogenous(J, table.dim, config, proj_hidden,
                                 input_norm=1.0 if normalize else None)
    weights.proj.validate()
    batch = EventBatch.from_log(log, weights.seq.max_len)
    train_mask, hold_mask = split_holdout(log, config.holdout)
    train, hold = batch.take(train_mask), batch.take(hold_mask)

    def objective(idx, w):
        value, grad = exogenous_gradient(train.take(idx), w, raw, mask, activation,
                                         config.l2_penalty * len(idx))
        if config.beta_pooling:
            pv, pg = beta_pooling_penalty(w.beta, config.beta_pooling * len(idx) / len(train))
            value -= pv
            grad.beta -= pg
        return value, grad

    def freeze(grad):
        if freeze_projection:
            grad.proj = grad.proj.zeros_like()
        return grad

    def evaluate(w):
        return mean_log_loss(hold, assemble(w, raw, mask, activation))

    weights, report = sgd_ascent(weights, objective, len(train), config,
                                 evaluate if len(hold) else None, freeze=freeze)
    report.holdout_loss = evaluate(weights) if len(hold) else float("nan")
    if normalize:
        weights.proj = weights.proj.absorb_input_map(center, scale)
    result = ExogenousFit(weights, mask, activation, report)
    return result.parameters(raw_table), weights.proj, result


def synthetic_raw_embeddings(B: np.ndarray, raw_dim: int = 256, noise_scale: float = 0.1,
                             rng=None, extra: np.ndarray | None = None) -> ExogenousEmbeddingTable:
    """Raw vectors that encode ``B``: [B, noise] rotated by a random orthogonal map.

    ``extra`` rows (embeddings of goods outside the catalog) are appended
    with indices following the catalog.
    """
    rng = as_generator(rng)
    B = np.asarray(B, dtype=np.float64)
    if extra is not None:
        B = np.vstack([B, extra])
    n, d = B.shape
    if raw_dim < d:
        raise ValueError(f"raw_dim {raw_dim} is smaller than the embedding dimension {d}")
    noise = rng.normal(0.0, noise_scale, (n, raw_dim - d))
    Q = ortho_group.rvs(raw_dim, random_state=rng) if raw_dim > 1 else np.ones((1, 1))
    return ExogenousEmbeddingTable(np.arange(n), np.hstack([B, noise]) @ Q)


# -- split-goods cross-validation ------------------------------------------------

@dataclasses.dataclass
class GroupMetrics:
    goods: np.ndarray
    share_r2: float
    log_share_r2: float
    diversion_r2: float


@dataclasses.dataclass
class CrossValidationResult:
    in_sample: GroupMetrics
    out_of_sample: GroupMetrics | None
    baseline_log_share_r2: float  # popularity-only predictions for the held-out goods
    fit: ExogenousFit


def _share_fit(implied: np.ndarray, observed: np.ndarray, goods: np.ndarray):
    obs, imp = observed[goods], implied[goods]
    pos = obs > 0
    log_r2 = fit_r2(np.log(obs[pos]), np.log(imp[pos])) if pos.sum() > 1 else float("nan")
    return fit_r2(obs, imp) if goods.size > 1 else float("nan"), log_r2


def _diversion_fit(params, log, goods, reference: np.ndarray) -> float:
    D = removal_diversion(params, log, goods)
    R = reference[goods]
    ok = np.isfinite(D) & np.isfinite(R)
    return corr_r2(R[ok], D[ok])


def split_goods_crossvalidation(log: InteractionLog, table: ExogenousEmbeddingTable,
                                config: TrainingConfig | None = None, rng=None,
                                out_fraction: float = 0.5, reference: ModelParameters | None = None,
                                proj_hidden: int = 32, activation: str = "tanh") -> CrossValidationResult:
    """Train with a random half of the goods on exogenous embeddings, score the rest out of sample.

    In-sample goods use projected embeddings throughout.  Out-of-sample goods
    learn free embeddings during training, then have them replaced by their
    projections for evaluation.  Share fit compares model-implied shares
    (realized pages and histories) with observed shares per group; diversion
    fit compares removal diversion against ``reference`` (by default the
    all-exogenous model itself, which makes the in-sample score trivial).
    The popularity-only baseline gives every out-of-sample good the average
    in-sample embedding, so its predictions differ only through exposure.
    """
    if not 0.0 <= out_fraction < 1.0:
        raise ValueError("out_fraction must lie in [0, 1)")
    config = config or TrainingConfig()
    J = log.n_goods
    perm = as_generator(rng).permutation(J)
    n_out = int(np.floor(out_fraction * J))
    out_goods = np.sort(perm[:n_out])
    in_goods = np.sort(perm[n_out:])
    _, _, fit = fit_exogenous(log, table, config, in_goods, proj_hidden, activation)
    raw = table.catalog_matrix(J)
    params = fit.parameters(raw, all_exogenous=True)
    observed = log.choice_shares()
    implied = core.event_probabilities(log, params).mean(axis=0)
    ref = removal_diversion(reference if reference is not None else params, log)

    def group(goods):
        share_r2, log_r2 = _share_fit(implied, observed, goods)
        return GroupMetrics(goods, share_r2, log_r2, _diversion_fit(params, log, goods, ref))

    inside = group(in_goods)
    if n_out == 0:
        return CrossValidationResult(inside, None, float("nan"), fit)
    base = dataclasses.replace(params, B=params.B.copy())
    base.B[out_goods] = params.B[in_goods].mean(axis=0)
    base_implied = core.event_probabilities(log, base).mean(axis=0)
    _, base_log_r2 = _share_fit(base_implied, observed, out_goods)
    return CrossValidationResult(inside, group(out_goods), base_log_r2, fit)


class ExogenousDemandModel(BaseEstimator):
    """Estimator wrapper around :func:`fit_exogenous`."""

    def __init__(self, embedding_dim=8, hidden=16, proj_hidden=32, activation="tanh",
                 learning_rate=0.01, batch_size=512, epochs=20, lr_decay=1.0, l2_penalty=1e-6,
                 beta_pooling=0.0, seed=0, max_len=10, optimizer="adam"):
        self.embedding_dim = embedding_dim
        self.hidden = hidden
        self.proj_hidden = proj_hidden
        self.activation = activation
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.epochs = epochs
        self.lr_decay = lr_decay
        self.l2_penalty = l2_penalty
        self.beta_pooling = beta_pooling
        self.seed = seed
        self.max_len = max_len
        self.optimizer = optimizer

    def fit(self, log: InteractionLog, table: ExogenousEmbeddingTable):
        config = TrainingConfig(embedding_dim=self.embedding_dim, hidden=self.hidden,
                                learning_rate=self.learning_rate, batch_size=self.batch_size,
                                epochs=self.epochs, lr_decay=self.lr_decay,
                                l2_penalty=self.l2_penalty, beta_pooling=self.beta_pooling,
                                seed=self.seed, max_len=self.max_len, optimizer=self.optimizer)
        self.params_, self.projection_, self.fit_ = fit_exogenous(
            log, table, config, proj_hidden=self.proj_hidden, activation=self.activation)
        self.table_ = table
        return self

    def embed(self, goods) -> np.ndarray:
        """Projected embeddings for any goods in the table, including new ones."""
        check_is_fitted(self, "projection_")
        return project(self.table_.rows_for(goods), self.projection_, self.activation)
