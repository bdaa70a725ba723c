"""Experience replay: per-task ring buffers and the selective long-term store."""

from __future__ import annotations

import enum
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError


class Strategy(enum.Enum):
    Reservoir = "reservoir"
    RewardMagnitude = "reward_magnitude"
    Coverage = "coverage"


@dataclass(frozen=True)
class MixSpec:
    batch_size: int = 48
    current_fraction: float = 0.5

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not 0.0 <= self.current_fraction <= 1.0:
            raise ConfigError("current_fraction must lie in [0, 1]")

    @property
    def n_current(self) -> int:
        return int(round(self.batch_size * self.current_fraction))


class RingBuffer:
    def __init__(self, capacity: int):
        if capacity < 1:
            raise ConfigError("ring capacity must be >= 1")
        self.capacity = capacity
        self.items: deque = deque(maxlen=capacity)
        self.total_pushed = 0

    def __len__(self):
        return len(self.items)

    def push(self, t) -> None:
        self.items.append(t)
        self.total_pushed += 1

    def sample(self, n: int, rng: np.random.Generator) -> list:
        if not self.items:
            raise IndexError("sample from empty buffer")
        idx = rng.integers(0, len(self.items), size=n)
        return [self.items[i] for i in idx]


class TaskRings:
    """One ring per task; sampling picks a non-empty task uniformly, then an item."""

    def __init__(self, capacity: int):
        self.capacity = capacity
        self.rings: dict = {}

    def __len__(self):
        return sum(len(r) for r in self.rings.values())

    def push(self, t) -> None:
        ring = self.rings.get(t.task)
        if ring is None:
            ring = self.rings[t.task] = RingBuffer(self.capacity)
        ring.push(t)

    def sample(self, n: int, rng: np.random.Generator) -> list:
        rings = [self.rings[k] for k in sorted(self.rings) if len(self.rings[k])]
        if not rings:
            raise IndexError("sample from empty buffer")
        which = rng.integers(0, len(rings), size=n)
        return [rings[w].items[rng.integers(0, len(rings[w]))] for w in which]


def sample(buffer, n: int, rng: np.random.Generator) -> list:
    return buffer.sample(n, rng)


def push(buffer, t) -> None:
    buffer.push(t)


@dataclass
class LongTermStore:
    budget: int = 2000
    strategy: Strategy = Strategy.Reservoir
    reservoirs: dict = field(default_factory=dict)
    seen: dict = field(default_factory=dict)
    # RewardMagnitude keeps (|r|, arrival index) alongside items for tie-breaking
    _ranks: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if self.budget < 1:
            raise ConfigError("store budget must be >= 1")
        self.strategy = Strategy(self.strategy)

    def keys(self) -> list:
        return list(self.reservoirs)

    def __len__(self):
        return sum(len(v) for v in self.reservoirs.values())


def select_into_longterm(store: LongTermStore, key, episode, rng: np.random.Generator) -> None:
    items = store.reservoirs.setdefault(key, [])
    seen = store.seen.get(key, 0)
    if store.strategy is Strategy.Reservoir:
        for t in episode:
            seen += 1
            if len(items) < store.budget:
                items.append(t)
            else:
                j = int(rng.integers(0, seen))
                if j < store.budget:
                    items[j] = t
    elif store.strategy is Strategy.RewardMagnitude:
        ranks = store._ranks.setdefault(key, [])
        for t in episode:
            seen += 1
            ranks.append((abs(t.r), seen))
            items.append(t)
        if len(items) > store.budget:
            order = sorted(range(len(items)), key=lambda i: ranks[i], reverse=True)[: store.budget]
            order.sort()
            items[:] = [items[i] for i in order]
            ranks[:] = [ranks[i] for i in order]
    else:
        seen += len(episode)
        pool = items + list(episode)
        if len(pool) > store.budget:
            pool = _max_min_subset(pool, store.budget)
        items[:] = pool
    store.seen[key] = seen


def _max_min_subset(pool, k):
    """Greedy farthest-point selection on agent positions, seeded with the first arrival."""
    pos = np.array([t.s.position for t in pool], dtype=float)
    chosen = [0]
    dist = np.linalg.norm(pos - pos[0], axis=1)
    for _ in range(k - 1):
        nxt = int(np.argmax(dist))
        chosen.append(nxt)
        dist = np.minimum(dist, np.linalg.norm(pos - pos[nxt], axis=1))
    chosen.sort()
    return [pool[i] for i in chosen]


def mixed_sample(current, store: LongTermStore | None, mix: MixSpec, rng: np.random.Generator) -> list:
    """Batch from the current buffer plus uniformly chosen historical keys."""
    keys = [k for k in (store.keys() if store is not None else []) if store.reservoirs[k]]
    if not keys:
        return current.sample(mix.batch_size, rng)
    n_cur = mix.n_current
    batch = current.sample(n_cur, rng) if n_cur else []
    for _ in range(mix.batch_size - n_cur):
        items = store.reservoirs[keys[int(rng.integers(0, len(keys)))]]
        batch.append(items[int(rng.integers(0, len(items)))])
    return batch
