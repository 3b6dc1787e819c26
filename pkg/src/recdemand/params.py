"""Parameter containers for the demand model and its relatives.

Every container is a dataclass of numpy arrays (possibly nested).  Gradients
share the container type of the parameters they differentiate, so optimizers,
finite-difference checks and checkpoints can treat them uniformly through
:meth:`ArrayBundle.leaves`.
"""
from __future__ import annotations

import dataclasses
from typing import Callable, Iterator

import numpy as np


class ArrayBundle:
    """Mixin for dataclasses whose fields are arrays or nested bundles."""

    def leaves(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            name = prefix + f.name
            if isinstance(value, ArrayBundle):
                yield from value.leaves(name + ".")
            else:
                yield name, value

    def map(self, fn: Callable[[np.ndarray], np.ndarray]):
        kwargs = {}
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            kwargs[f.name] = value.map(fn) if isinstance(value, ArrayBundle) else fn(value)
        return type(self)(**kwargs)

    def combine(self, other, fn: Callable[[np.ndarray, np.ndarray], np.ndarray]):
        if type(other) is not type(self):
            raise TypeError(f"cannot combine {type(self).__name__} with {type(other).__name__}")
        kwargs = {}
        for f in dataclasses.fields(self):
            a, b = getattr(self, f.name), getattr(other, f.name)
            kwargs[f.name] = a.combine(b, fn) if isinstance(a, ArrayBundle) else fn(a, b)
        return type(self)(**kwargs)

    def copy(self):
        return self.map(lambda a: np.array(a, dtype=np.float64, copy=True))

    def zeros_like(self):
        return self.map(np.zeros_like)

    def __add__(self, other):
        return self.combine(other, np.add)

    def __sub__(self, other):
        return self.combine(other, np.subtract)

    def scale(self, factor: float):
        return self.map(lambda a: a * factor)

    def ravel(self) -> np.ndarray:
        parts = [np.ravel(a) for _, a in self.leaves()]
        return np.concatenate(parts) if parts else np.zeros(0)

    def with_vector(self, vec: np.ndarray):
        """Return a copy whose leaves are filled from a flat vector (ravel order)."""
        vec = np.asarray(vec, dtype=np.float64)
        size = sum(a.size for _, a in self.leaves())
        if vec.shape != (size,):
            raise ValueError(f"expected flat vector of length {size}, got shape {vec.shape}")
        offset = 0

        def take(a):
            nonlocal offset
            out = vec[offset:offset + a.size].reshape(a.shape).copy()
            offset += a.size
            return out

        return self.map(take)

    @property
    def size(self) -> int:
        return sum(a.size for _, a in self.leaves())

    def sqnorm(self) -> float:
        return float(sum(np.sum(a * a) for _, a in self.leaves()))

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(a)) for _, a in self.leaves())

    def allclose(self, other, rtol=0.0, atol=0.0) -> bool:
        return all(
            a.shape == b.shape and np.allclose(a, b, rtol=rtol, atol=atol)
            for (_, a), (_, b) in zip(self.leaves(), other.leaves())
        )

    def array_equal(self, other) -> bool:
        return all(np.array_equal(a, b) for (_, a), (_, b) in zip(self.leaves(), other.leaves()))


@dataclasses.dataclass
class SequenceWeights(ArrayBundle):
    """Attention sequence model mapping a watch history to a user state.

    ``mlp1`` (``W1``/``b1`` then ``W1_out``/``b1_out``) turns each history item
    into an attention logit (output column 0) and a transformed vector (columns
    1..d).  ``mlp2`` (``W2``/``b2`` then ``W2_out``/``b2_out``) maps the
    attention-weighted sum to the state.
    """

    pos_embed: np.ndarray  # (max_len, d)
    W1: np.ndarray  # (d, h1)
    b1: np.ndarray  # (h1,)
    W1_out: np.ndarray  # (h1, 1 + d)
    b1_out: np.ndarray  # (1 + d,)
    W2: np.ndarray  # (d, h2)
    b2: np.ndarray  # (h2,)
    W2_out: np.ndarray  # (h2, d)
    b2_out: np.ndarray  # (d,)

    @property
    def max_len(self) -> int:
        return self.pos_embed.shape[0]

    @property
    def dim(self) -> int:
        return self.pos_embed.shape[1]

    def validate(self, dim: int) -> None:
        L, d = self.pos_embed.shape
        h1 = self.W1.shape[1]
        h2 = self.W2.shape[1]
        expected = {
            "pos_embed": (L, dim),
            "W1": (dim, h1),
            "b1": (h1,),
            "W1_out": (h1, 1 + dim),
            "b1_out": (1 + dim,),
            "W2": (dim, h2),
            "b2": (h2,),
            "W2_out": (h2, dim),
            "b2_out": (dim,),
        }
        for name, shape in expected.items():
            got = getattr(self, name).shape
            if got != shape:
                raise ValueError(f"sequence weight {name} has shape {got}, expected {shape}")

    @classmethod
    def zeros(cls, dim: int, max_len: int, hidden: int = 16) -> "SequenceWeights":
        return cls(
            pos_embed=np.zeros((max_len, dim)),
            W1=np.zeros((dim, hidden)),
            b1=np.zeros(hidden),
            W1_out=np.zeros((hidden, 1 + dim)),
            b1_out=np.zeros(1 + dim),
            W2=np.zeros((dim, hidden)),
            b2=np.zeros(hidden),
            W2_out=np.zeros((hidden, dim)),
            b2_out=np.zeros(dim),
        )


@dataclasses.dataclass
class ModelParameters(ArrayBundle):
    """All learnable quantities of the demand model.

    ``B`` holds one embedding row per good, ``beta`` one recommendation bonus
    per (good, slot), ``default_state`` is the user state for an empty history.
    """

    B: np.ndarray  # (J, d)
    beta: np.ndarray  # (J, S)
    default_state: np.ndarray  # (d,)
    seq: SequenceWeights

    @property
    def n_goods(self) -> int:
        return self.B.shape[0]

    @property
    def dim(self) -> int:
        return self.B.shape[1]

    @property
    def n_slots(self) -> int:
        return self.beta.shape[1]

    @property
    def max_len(self) -> int:
        return self.seq.max_len

    def validate(self) -> "ModelParameters":
        J, d = self.B.shape
        if self.beta.ndim != 2 or self.beta.shape[0] != J:
            raise ValueError(f"beta has shape {self.beta.shape}, expected ({J}, n_slots)")
        if self.default_state.shape != (d,):
            raise ValueError(f"default_state has shape {self.default_state.shape}, expected ({d},)")
        self.seq.validate(d)
        if not self.all_finite():
            raise ValueError("model parameters contain non-finite entries")
        return self

    @classmethod
    def zeros(cls, n_goods: int, dim: int, n_slots: int = 3, max_len: int = 10,
              hidden: int = 16) -> "ModelParameters":
        return cls(
            B=np.zeros((n_goods, dim)),
            beta=np.zeros((n_goods, n_slots)),
            default_state=np.zeros(dim),
            seq=SequenceWeights.zeros(dim, max_len, hidden),
        )


Gradient = ModelParameters


def random_like(template: ArrayBundle, scale: float, rng: np.random.Generator):
    """i.i.d. zero-mean normal draws with standard deviation ``scale`` in every leaf."""
    return template.map(lambda a: scale * rng.standard_normal(a.shape))
