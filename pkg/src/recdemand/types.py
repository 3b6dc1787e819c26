"""Domain types: catalog, slot layout, recommendation pages, histories and logs.

In memory, goods are addressed by their 0-based position in the catalog (the
"good index").  The outside option is ``-1`` in choice arrays, so that
``probs[choice]`` picks the last entry of a probability vector laid out as
``(good_0, ..., good_{J-1}, outside)``.  Public good ids (positive integers,
with ``0`` meaning "outside") only appear at the wire boundary, see
:mod:`recdemand.io`.
"""
from __future__ import annotations

import dataclasses
import enum
from typing import Mapping, Sequence

import numpy as np

OUTSIDE = -1


class SlotKind(enum.IntEnum):
    BILLBOARD = 0
    TOP25 = 1
    TOP100 = 2


DEFAULT_SLOT_NAMES = ("billboard", "top25", "top100")


def slot_names(n_slots: int) -> tuple[str, ...]:
    names = list(DEFAULT_SLOT_NAMES[:n_slots])
    names += [f"slot{r}" for r in range(len(names), n_slots)]
    return tuple(names)


@dataclasses.dataclass(frozen=True)
class Catalog:
    goods: tuple[int, ...]
    dim: int

    def __post_init__(self):
        goods = tuple(int(g) for g in self.goods)
        object.__setattr__(self, "goods", goods)
        if len(set(goods)) != len(goods):
            raise ValueError("catalog good ids must be unique")
        if any(g <= 0 for g in goods):
            raise ValueError("good ids must be positive; 0 is reserved for the outside option")
        if self.dim < 1:
            raise ValueError("embedding dimension must be positive")

    @classmethod
    def range(cls, n_goods: int, dim: int) -> "Catalog":
        return cls(tuple(range(1, n_goods + 1)), dim)

    def __len__(self) -> int:
        return len(self.goods)

    def index(self, good_id: int) -> int:
        try:
            return self._lookup[int(good_id)]
        except KeyError:
            raise KeyError(f"good id {good_id} is not in the catalog") from None

    @property
    def _lookup(self) -> dict[int, int]:
        cache = self.__dict__.get("_lookup_cache")
        if cache is None:
            cache = {g: i for i, g in enumerate(self.goods)}
            object.__setattr__(self, "_lookup_cache", cache)
        return cache


@dataclasses.dataclass(frozen=True)
class SlotLayout:
    """Per-slot capacities; page arrays put slot 0's positions first, then slot 1, ..."""

    capacities: tuple[int, ...] = (1, 5, 15)

    def __post_init__(self):
        caps = tuple(int(c) for c in self.capacities)
        object.__setattr__(self, "capacities", caps)
        if not caps or any(c < 1 for c in caps):
            raise ValueError(f"slot capacities must be >= 1, got {caps}")

    @property
    def n_slots(self) -> int:
        return len(self.capacities)

    @property
    def total(self) -> int:
        return sum(self.capacities)

    @property
    def names(self) -> tuple[str, ...]:
        return slot_names(self.n_slots)

    @property
    def slot_of_position(self) -> np.ndarray:
        return np.repeat(np.arange(self.n_slots), self.capacities)

    @property
    def offsets(self) -> np.ndarray:
        return np.concatenate([[0], np.cumsum(self.capacities)])


@dataclasses.dataclass(frozen=True)
class RecommendationPage:
    """Slotted set of recommended goods shown to one user on one day."""

    slots: Mapping[int, tuple[int, ...]]
    capacities: tuple[int, ...]

    def __post_init__(self):
        slots = {int(r): tuple(int(g) for g in goods) for r, goods in self.slots.items()}
        object.__setattr__(self, "slots", slots)
        object.__setattr__(self, "capacities", tuple(int(c) for c in self.capacities))
        seen: set[int] = set()
        for r, goods in slots.items():
            if not 0 <= r < len(self.capacities):
                raise ValueError(f"slot {r} is outside the layout")
            if len(goods) > self.capacities[r]:
                raise ValueError(f"slot {r} holds {len(goods)} goods, capacity {self.capacities[r]}")
            for g in goods:
                if g in seen:
                    raise ValueError(f"good {g} appears in more than one slot")
                seen.add(g)

    @classmethod
    def empty(cls, capacities: Sequence[int]) -> "RecommendationPage":
        return cls({}, tuple(capacities))

    def slot_of(self, good: int) -> int | None:
        for r, goods in self.slots.items():
            if good in goods:
                return r
        return None

    def goods(self) -> list[int]:
        return [g for r in sorted(self.slots) for g in self.slots[r]]

    def to_array(self) -> np.ndarray:
        layout = SlotLayout(self.capacities)
        out = np.full(layout.total, -1, dtype=np.int64)
        for r, goods in self.slots.items():
            start = layout.offsets[r]
            out[start:start + len(goods)] = goods
        return out

    @classmethod
    def from_array(cls, row: np.ndarray, capacities: Sequence[int]) -> "RecommendationPage":
        layout = SlotLayout(tuple(capacities))
        slots = {}
        for r in range(layout.n_slots):
            seg = row[layout.offsets[r]:layout.offsets[r + 1]]
            goods = tuple(int(g) for g in seg if g >= 0)
            if goods:
                slots[r] = goods
        return cls(slots, layout.capacities)

    def check_catalog(self, n_goods: int) -> None:
        for g in self.goods():
            if not 0 <= g < n_goods:
                raise ValueError(f"page contains good index {g} outside the catalog")


@dataclasses.dataclass(frozen=True)
class UserHistory:
    """Watched goods in chronological order, truncated to the most recent ``max_len``."""

    items: tuple[tuple[int, int], ...]  # (period, good index)
    max_len: int

    def __post_init__(self):
        items = tuple((int(t), int(g)) for t, g in self.items)
        periods = [t for t, _ in items]
        if any(b <= a for a, b in zip(periods, periods[1:])):
            raise ValueError("history periods must be strictly increasing")
        if self.max_len < 1:
            raise ValueError("max_len must be positive")
        object.__setattr__(self, "items", items[-self.max_len:])

    @property
    def goods(self) -> list[int]:
        return [g for _, g in self.items]

    def __len__(self) -> int:
        return len(self.items)


@dataclasses.dataclass(frozen=True)
class ChoiceEvent:
    user: int
    period: int
    page: RecommendationPage
    choice: int  # good index or OUTSIDE


@dataclasses.dataclass
class InteractionLog:
    """Per-user per-day pages and choices, stored columnar and sorted by (user, day).

    ``prior`` optionally holds goods a user watched before the logged window,
    most recent first; they lead the user's history and count as watched.
    """

    users: np.ndarray
    days: np.ndarray
    choices: np.ndarray
    pages: np.ndarray  # (n_events, layout.total), -1 = empty position
    layout: SlotLayout
    n_goods: int
    arms: dict[int, str] = dataclasses.field(default_factory=dict)
    prior: dict[int, tuple[int, ...]] = dataclasses.field(default_factory=dict)

    def __post_init__(self):
        self.prior = {int(u): tuple(int(g) for g in goods) for u, goods in self.prior.items() if goods}
        self.users = np.asarray(self.users, dtype=np.int64).reshape(-1)
        self.days = np.asarray(self.days, dtype=np.int64).reshape(-1)
        self.choices = np.asarray(self.choices, dtype=np.int64).reshape(-1)
        n = self.users.shape[0]
        self.pages = np.asarray(self.pages, dtype=np.int64).reshape(n, self.layout.total)
        if not (self.days.shape[0] == self.choices.shape[0] == n):
            raise ValueError("users, days and choices must have equal length")
        order = np.lexsort((self.days, self.users))
        if not np.array_equal(order, np.arange(n)):
            self.users, self.days = self.users[order], self.days[order]
            self.choices, self.pages = self.choices[order], self.pages[order]

    @property
    def n_events(self) -> int:
        return int(self.users.shape[0])

    def __len__(self) -> int:
        return self.n_events

    def subset(self, mask: np.ndarray) -> "InteractionLog":
        mask = np.asarray(mask)
        users = self.users[mask]
        keep = set(users.tolist())
        arms = {u: a for u, a in self.arms.items() if u in keep}
        prior = {u: g for u, g in self.prior.items() if u in keep}
        return InteractionLog(users, self.days[mask], self.choices[mask], self.pages[mask],
                              self.layout, self.n_goods, arms, prior)

    def event(self, i: int) -> ChoiceEvent:
        page = RecommendationPage.from_array(self.pages[i], self.layout.capacities)
        return ChoiceEvent(int(self.users[i]), int(self.days[i]), page, int(self.choices[i]))

    def histories(self, max_len: int) -> tuple[np.ndarray, np.ndarray]:
        """History matrix for every event: ``H[e, l]`` is the l-th most recent
        good chosen by the user strictly before event ``e`` (``-1`` padding)."""
        n = self.n_events
        H = np.full((n, max_len), -1, dtype=np.int64)
        if n == 0:
            return H, np.zeros(0, dtype=np.int64)
        inside = self.choices >= 0
        new_user = np.ones(n, dtype=bool)
        new_user[1:] = self.users[1:] != self.users[:-1]
        user_start = np.maximum.accumulate(np.where(new_user, np.arange(n), 0))
        cum_inside = np.cumsum(inside)
        # inside choices strictly before e, within the same user
        before = cum_inside - inside
        start_count = before[user_start]
        count = before - start_count
        inside_goods = self.choices[inside]
        for l in range(max_len):
            ok = count > l
            idx = before[ok] - 1 - l
            H[ok, l] = inside_goods[idx]
        if self.prior:
            P, rows = self._prior_matrix(max_len)
            plen = (P >= 0).sum(axis=1)[rows]
            for l in range(max_len):
                k = l - count
                ok = (k >= 0) & (k < plen)
                H[ok, l] = P[rows[ok], k[ok]]
            return H, np.minimum(count + plen, max_len)
        return H, np.minimum(count, max_len)

    def _prior_matrix(self, width: int) -> tuple[np.ndarray, np.ndarray]:
        """Prior goods as a padded (n_users_with_prior + 1, width) matrix and the
        row of each event's user (the last row is all padding)."""
        ids = np.array(sorted(self.prior), dtype=np.int64)
        P = np.full((ids.size + 1, width), -1, dtype=np.int64)
        for i, u in enumerate(ids.tolist()):
            goods = self.prior[u][:width]
            P[i, :len(goods)] = goods
        pos = np.searchsorted(ids, self.users)
        hit = pos < ids.size
        hit[hit] = ids[pos[hit]] == self.users[hit]
        return P, np.where(hit, pos, ids.size)

    def watched_before(self) -> list[set[int]]:
        """Per event, the set of goods the user chose on earlier days."""
        out: list[set[int]] = []
        current_user, seen = None, set()
        for u, c in zip(self.users.tolist(), self.choices.tolist()):
            if u != current_user:
                current_user, seen = u, set(self.prior.get(u, ()))
            out.append(set(seen))
            if c >= 0:
                seen.add(c)
        return out

    def watched_mask(self) -> np.ndarray:
        """Boolean (n_events, n_goods): goods the user watched before each event."""
        n = self.n_events
        mask = np.zeros((n, self.n_goods), dtype=bool)
        if n == 0:
            return mask
        inside = np.flatnonzero(self.choices >= 0)
        # mark the day after each choice, then carry forward within the user
        nxt = inside + 1
        ok = nxt < n
        ok[ok] = self.users[nxt[ok]] == self.users[inside[ok]]
        mask[nxt[ok], self.choices[inside[ok]]] = True
        new_user = np.ones(n, dtype=bool)
        new_user[1:] = self.users[1:] != self.users[:-1]
        for e in np.flatnonzero(new_user).tolist():
            mask[e, list(self.prior.get(int(self.users[e]), ()))] = True
        starts = np.flatnonzero(new_user)
        bounds = np.append(starts, n)
        for a, b in zip(bounds[:-1].tolist(), bounds[1:].tolist()):
            np.logical_or.accumulate(mask[a:b], axis=0, out=mask[a:b])
        return mask

    def unique_users(self) -> np.ndarray:
        return np.unique(self.users)

    def choice_shares(self) -> np.ndarray:
        """Empirical per-user-day shares laid out as (goods..., outside)."""
        counts = np.bincount(np.where(self.choices >= 0, self.choices, self.n_goods),
                             minlength=self.n_goods + 1).astype(np.float64)
        return counts / max(self.n_events, 1)

    def recommendation_rates(self) -> np.ndarray:
        """Fraction of user-days on which each good appears on the page."""
        flat = self.pages[self.pages >= 0]
        return np.bincount(flat, minlength=self.n_goods) / max(self.n_events, 1)

    @classmethod
    def concat(cls, logs: Sequence["InteractionLog"]) -> "InteractionLog":
        first = logs[0]
        arms: dict[int, str] = {}
        prior: dict[int, tuple[int, ...]] = {}
        for log in logs:
            arms.update(log.arms)
            prior.update(log.prior)
        return cls(np.concatenate([l.users for l in logs]), np.concatenate([l.days for l in logs]),
                   np.concatenate([l.choices for l in logs]),
                   np.concatenate([l.pages for l in logs]), first.layout, first.n_goods, arms, prior)
