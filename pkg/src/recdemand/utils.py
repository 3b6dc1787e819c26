from __future__ import annotations

import hashlib

import numpy as np
from sklearn.metrics import r2_score


def as_generator(random_state=None) -> np.random.Generator:
    if isinstance(random_state, np.random.Generator):
        return random_state
    return np.random.default_rng(random_state)


def seed_from(random_state) -> int:
    """Integer seed for deriving substreams; draws one from a Generator if given."""
    if isinstance(random_state, np.random.Generator):
        return int(random_state.integers(0, 2**63 - 1))
    if random_state is None:
        return 0
    return int(random_state)


def fit_r2(observed, predicted) -> float:
    """Coefficient of determination of ``predicted`` as a forecast of ``observed``."""
    observed = np.asarray(observed, dtype=np.float64)
    predicted = np.asarray(predicted, dtype=np.float64)
    if observed.size < 2:
        return float("nan")
    return float(r2_score(observed, predicted))


def corr_r2(x, y) -> float:
    """Squared Pearson correlation (R^2 of a least-squares line through the scatter)."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.size < 2 or np.std(x) == 0 or np.std(y) == 0:
        return float("nan")
    return float(np.corrcoef(x, y)[0, 1] ** 2)


def git_blob_hash(data: bytes) -> str:
    h = hashlib.sha1()
    h.update(b"blob %d\0" % len(data))
    h.update(data)
    return h.hexdigest()
