"""Utility model, logit choice probabilities, engagement and the user-state
sequence model.

The batched functions (``encode_states``, ``page_bonus``, ``utilities``,
``choice_probs``) work on whole arrays of events and come with hand-written
reverse passes used by estimation.  The single-event functions below them are
thin wrappers for interactive use and tests.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .params import ModelParameters, SequenceWeights
from .types import Catalog, InteractionLog, RecommendationPage, SlotLayout, UserHistory


@dataclass
class StateCache:
    H: np.ndarray
    mask: np.ndarray
    empty: np.ndarray
    X: np.ndarray
    Hh: np.ndarray
    V: np.ndarray
    w: np.ndarray
    s: np.ndarray
    G: np.ndarray


def encode_states(H: np.ndarray, lengths: np.ndarray, B: np.ndarray, seq: SequenceWeights,
                  default_state: np.ndarray, return_cache: bool = False):
    """User states for a batch of histories.

    ``H`` is (N, L) with ``H[n, l]`` the l-th most recent good (``-1`` pads);
    position ``l`` picks up the recency encoding ``pos_embed[l]``.
    """
    N = H.shape[0]
    d = B.shape[1]
    L = seq.max_len
    if H.ndim != 2 or H.shape[1] > L:
        raise ValueError(f"history matrix has shape {H.shape}; at most {L} columns allowed")
    if seq.dim != d or default_state.shape != (d,):
        raise ValueError("sequence weights do not match embedding dimension")
    Lh = H.shape[1]
    mask = H >= 0
    empty = ~mask.any(axis=1)
    X = B[np.where(mask, H, 0)] + seq.pos_embed[None, :Lh, :]
    Hh = np.tanh(X @ seq.W1 + seq.b1)
    O = Hh @ seq.W1_out + seq.b1_out
    logits = np.where(mask, O[..., 0], -np.inf)
    m = np.where(empty, 0.0, logits.max(axis=1, initial=-np.inf))
    e = np.where(mask, np.exp(logits - m[:, None]), 0.0)
    z = e.sum(axis=1)
    w = e / np.where(z > 0, z, 1.0)[:, None]
    V = O[..., 1:]
    s = np.einsum("nl,nld->nd", w, V)
    G = np.tanh(s @ seq.W2 + seq.b2)
    A = G @ seq.W2_out + seq.b2_out
    A[empty] = default_state
    if not return_cache:
        return A
    return A, StateCache(H, mask, empty, X, Hh, V, w, s, G)


def backprop_states(dA: np.ndarray, cache: StateCache, seq: SequenceWeights, n_goods: int):
    """Reverse pass of :func:`encode_states`.

    Returns ``(dB, dseq, d_default_state)``.
    """
    c = cache
    dA = np.asarray(dA, dtype=np.float64)
    d_default = dA[c.empty].sum(axis=0)
    dA = np.where(c.empty[:, None], 0.0, dA)
    d = dA.shape[1]

    dW2_out = c.G.T @ dA
    db2_out = dA.sum(axis=0)
    dZ2 = (dA @ seq.W2_out.T) * (1.0 - c.G ** 2)
    dW2 = c.s.T @ dZ2
    db2 = dZ2.sum(axis=0)
    ds = dZ2 @ seq.W2.T

    dV = c.w[..., None] * ds[:, None, :]
    dw = np.einsum("nld,nd->nl", c.V, ds)
    dlogit = c.w * (dw - np.sum(c.w * dw, axis=1, keepdims=True))
    dO = np.concatenate([dlogit[..., None], dV], axis=-1) * c.mask[..., None]

    h1 = seq.W1.shape[1]
    Hh2 = c.Hh.reshape(-1, h1)
    dO2 = dO.reshape(-1, 1 + d)
    dW1_out = Hh2.T @ dO2
    db1_out = dO2.sum(axis=0)
    dZ1 = (dO2 @ seq.W1_out.T) * (1.0 - Hh2 ** 2)
    X2 = c.X.reshape(-1, d)
    dW1 = X2.T @ dZ1
    db1 = dZ1.sum(axis=0)
    dX = (dZ1 @ seq.W1.T).reshape(c.X.shape) * c.mask[..., None]

    dpos = np.zeros_like(seq.pos_embed)
    dpos[: dX.shape[1]] = dX.sum(axis=0)
    dB = scatter_rows(c.H[c.mask], dX[c.mask], n_goods)
    dseq = SequenceWeights(dpos, dW1, db1, dW1_out, db1_out, dW2, db2, dW2_out, db2_out)
    return dB, dseq, d_default


def scatter_rows(index: np.ndarray, rows: np.ndarray, n_rows: int) -> np.ndarray:
    """Sum ``rows`` into an (n_rows, k) array at ``index`` (duplicates accumulate)."""
    out = np.zeros((n_rows, rows.shape[1]))
    for k in range(rows.shape[1]):
        out[:, k] = np.bincount(index, weights=rows[:, k], minlength=n_rows)
    return out


def page_bonus(pages: np.ndarray, beta: np.ndarray, layout: SlotLayout) -> np.ndarray:
    """(N, J) matrix of recommendation bonuses implied by the pages."""
    N = pages.shape[0]
    J = beta.shape[0]
    out = np.zeros((N, J))
    rows, pos = np.nonzero(pages >= 0)
    goods = pages[rows, pos]
    out[rows, goods] = beta[goods, layout.slot_of_position[pos]]
    return out


def utilities(A: np.ndarray, params: ModelParameters, pages: np.ndarray, layout: SlotLayout):
    """Deterministic inside-good utilities, shape (N, J); the outside option is 0."""
    return A @ params.B.T + page_bonus(pages, params.beta, layout)


def choice_probs(U: np.ndarray) -> np.ndarray:
    """Logit probabilities with an appended zero-utility outside option (last column)."""
    if np.isnan(U).any():
        raise FloatingPointError("NaN utility")
    m = np.maximum(U.max(axis=1, initial=-np.inf), 0.0)
    e = np.exp(U - m[:, None])
    e0 = np.exp(-m)
    z = e.sum(axis=1) + e0
    return np.concatenate([e, e0[:, None]], axis=1) / z[:, None]


def log_choice_probs(U: np.ndarray) -> np.ndarray:
    if np.isnan(U).any():
        raise FloatingPointError("NaN utility")
    m = np.maximum(U.max(axis=1, initial=-np.inf), 0.0)
    lse = m + np.log(np.exp(U - m[:, None]).sum(axis=1) + np.exp(-m))
    return np.concatenate([U, np.zeros((U.shape[0], 1))], axis=1) - lse[:, None]


def log_states(log: InteractionLog, params: ModelParameters) -> np.ndarray:
    H, lengths = log.histories(params.max_len)
    return encode_states(H, lengths, params.B, params.seq, params.default_state)


def event_probabilities(log: InteractionLog, params: ModelParameters,
                        pages: np.ndarray | None = None, states: np.ndarray | None = None,
                        chunk: int = 20000) -> np.ndarray:
    """Per-event choice probabilities (n_events, J + 1), optionally on substitute pages."""
    if states is None:
        states = log_states(log, params)
    pages = log.pages if pages is None else pages
    out = np.empty((log.n_events, params.n_goods + 1))
    for lo in range(0, log.n_events, chunk):
        hi = lo + chunk
        out[lo:hi] = choice_probs(utilities(states[lo:hi], params, pages[lo:hi], log.layout))
    return out


# -- single-event API -------------------------------------------------------

def _history_matrix(history: UserHistory, max_len: int) -> np.ndarray:
    goods = history.goods[::-1][:max_len]
    H = np.full((1, max(len(goods), 1)), -1, dtype=np.int64)
    H[0, : len(goods)] = goods
    return H


def compute_user_state(history: UserHistory, params: ModelParameters) -> np.ndarray:
    for g in history.goods:
        if not 0 <= g < params.n_goods:
            raise KeyError(f"history contains good index {g} outside the catalog")
    H = _history_matrix(history, params.max_len)
    lengths = (H >= 0).sum(axis=1)
    return encode_states(H, lengths, params.B, params.seq, params.default_state)[0]


def deterministic_utility(state: np.ndarray, good: int, page: RecommendationPage,
                          params: ModelParameters) -> float:
    if not 0 <= good < params.n_goods:
        raise KeyError(f"good index {good} is not in the catalog")
    state = np.asarray(state, dtype=np.float64)
    if state.shape != (params.dim,):
        raise ValueError(f"state has shape {state.shape}, expected ({params.dim},)")
    u = float(state @ params.B[good])
    r = page.slot_of(good)
    if r is not None:
        u += float(params.beta[good, r])
    return u


def choice_probabilities(state: np.ndarray, catalog: Catalog, page: RecommendationPage,
                         params: ModelParameters) -> np.ndarray:
    """Probabilities over (goods in catalog order..., outside)."""
    if len(catalog) != params.n_goods:
        raise ValueError("catalog size does not match parameters")
    page.check_catalog(params.n_goods)
    state = np.asarray(state, dtype=np.float64).reshape(1, -1)
    layout = SlotLayout(page.capacities)
    if layout.n_slots != params.n_slots:
        raise ValueError("page slot count does not match parameters")
    U = utilities(state, params, page.to_array()[None, :], layout)
    return choice_probs(U)[0]


def engagement(probs: np.ndarray) -> float:
    """Probability of consuming any inside good: one minus the outside share."""
    out = np.asarray(probs, dtype=np.float64)[..., :-1].sum(axis=-1)
    return float(out) if out.ndim == 0 else out


def log_likelihood(log: InteractionLog, params: ModelParameters) -> float:
    """Sum over events of the log-probability of the observed choice."""
    if log.n_goods != params.n_goods:
        raise ValueError("log and parameters disagree on the number of goods")
    if log.n_events == 0:
        return 0.0
    bad = (log.choices >= log.n_goods) | (log.choices < -1)
    if bad.any() or (log.pages >= log.n_goods).any():
        raise KeyError("log references goods outside the catalog")
    states = log_states(log, params)
    total = 0.0
    for lo in range(0, log.n_events, 20000):
        hi = lo + 20000
        lp = log_choice_probs(utilities(states[lo:hi], params, log.pages[lo:hi], log.layout))
        total += float(lp[np.arange(lp.shape[0]), log.choices[lo:hi]].sum())
    return total
