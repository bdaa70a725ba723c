import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from seril.errors import ConfigError
from seril.replay import (
    LongTermStore,
    MixSpec,
    RingBuffer,
    Strategy,
    TaskRings,
    mixed_sample,
    push,
    sample,
    select_into_longterm,
)
from seril.world import Action, AgentState, TaskId, Transition, all_specs

SPECS = all_specs()
BOX = (5, 5, 3)


def tr(i=0, r=0.0, task=TaskId.TopLeft, env=SPECS[0], pos=None):
    p = pos if pos is not None else (i % 64, (i // 64) % 64, 0)
    s = AgentState(p, BOX, (p,) * 4)
    return Transition(s, Action.PLUS_X, float(r), s, False, task, env)


def reservoir_retention_pvalue(runs=200, n=1000, budget=100, seed=0):
    """Chi-square p-value of per-item retention counts against the uniform budget/n rate."""
    counts = np.zeros(n)
    items = [tr(i) for i in range(n)]
    index = {id(t): i for i, t in enumerate(items)}
    for run in range(runs):
        store = LongTermStore(budget, Strategy.Reservoir)
        rng = np.random.default_rng([seed, run])
        # feed in several chunks, as environments deliver episodes
        for lo in range(0, n, 137):
            select_into_longterm(store, ("k",), items[lo:lo + 137], rng)
        for t in store.reservoirs[("k",)]:
            counts[index[id(t)]] += 1
    expected = np.full(n, runs * budget / n)
    return stats.chisquare(counts, expected).pvalue


def test_ring_semantics():
    buf = RingBuffer(3)
    for x in "abcd":
        push(buf, x)
    assert list(buf.items) == ["b", "c", "d"]
    assert buf.total_pushed == 4
    one = RingBuffer(5)
    push(one, "z")
    assert len(one) == 1
    assert sample(one, 5, np.random.default_rng(0)) == ["z"] * 5


@given(st.integers(1, 20), st.integers(0, 60))
def test_ring_keeps_most_recent(cap, n):
    buf = RingBuffer(cap)
    for i in range(n):
        buf.push(i)
    assert len(buf) == min(cap, n)
    assert list(buf.items) == list(range(max(0, n - cap), n))


def test_sample_empty_raises():
    with pytest.raises(IndexError):
        RingBuffer(3).sample(1, np.random.default_rng(0))
    with pytest.raises(IndexError):
        TaskRings(3).sample(1, np.random.default_rng(0))


def test_sample_deterministic():
    buf = RingBuffer(50)
    for i in range(50):
        buf.push(i)
    assert sample(buf, 10, np.random.default_rng(4)) == sample(buf, 10, np.random.default_rng(4))


def test_sample_uniform_chi_square():
    buf = RingBuffer(10)
    for i in range(10):
        buf.push(i)
    draws = sample(buf, 10_000, np.random.default_rng(1))
    counts = np.bincount(draws, minlength=10)
    assert stats.chisquare(counts).pvalue > 0.01


def test_task_rings_uniform_over_tasks():
    rings = TaskRings(100)
    for i in range(90):
        rings.push(tr(i, task=TaskId.TopLeft))
    for i in range(10):
        rings.push(tr(i, task=TaskId.Center))
    batch = rings.sample(4000, np.random.default_rng(0))
    n_center = sum(t.task == TaskId.Center for t in batch)
    assert stats.binomtest(n_center, 4000, 0.5).pvalue > 0.01


@pytest.mark.parametrize("strategy", list(Strategy))
def test_under_capacity_keeps_everything(strategy):
    store = LongTermStore(10, strategy)
    items = [tr(i, r=i / 10) for i in range(10)]
    select_into_longterm(store, "k", items, np.random.default_rng(0))
    assert store.reservoirs["k"] == items
    assert store.seen["k"] == 10


def test_reservoir_retention_uniform():
    assert reservoir_retention_pvalue() > 0.01


def test_reward_magnitude_keeps_largest():
    store = LongTermStore(2, Strategy.RewardMagnitude)
    select_into_longterm(store, "k", [tr(0, 0.1), tr(1, -0.9), tr(2, 0.5)], np.random.default_rng(0))
    assert sorted(t.r for t in store.reservoirs["k"]) == [-0.9, 0.5]


def test_reward_magnitude_ties_favour_recent():
    store = LongTermStore(2, Strategy.RewardMagnitude)
    items = [tr(i, 1.0) for i in range(4)]
    select_into_longterm(store, "k", items[:2], np.random.default_rng(0))
    select_into_longterm(store, "k", items[2:], np.random.default_rng(0))
    assert store.reservoirs["k"] == items[2:]


def test_coverage_spreads_positions():
    store = LongTermStore(2, Strategy.Coverage)
    pts = [(0, 0, 0), (1, 0, 0), (10, 10, 10), (2, 0, 0)]
    select_into_longterm(store, "k", [tr(pos=p) for p in pts], np.random.default_rng(0))
    assert [t.s.position for t in store.reservoirs["k"]] == [(0, 0, 0), (10, 10, 10)]


@settings(max_examples=40, deadline=None)
@given(
    st.sampled_from(list(Strategy)),
    st.integers(1, 8),
    st.lists(st.tuples(st.integers(0, 3), st.integers(0, 12)), max_size=25),
)
def test_budgets_never_exceeded(strategy, budget, feeds):
    store = LongTermStore(budget, strategy)
    rng = np.random.default_rng(0)
    keys_before = []
    for n, (key, size) in enumerate(feeds):
        select_into_longterm(store, key, [tr(n * 13 + i, r=(i % 5) / 5) for i in range(size)], rng)
        assert all(len(v) <= budget for v in store.reservoirs.values())
        assert store.keys()[: len(keys_before)] == keys_before
        keys_before = store.keys()


def test_mixspec_validation():
    with pytest.raises(ConfigError):
        MixSpec(0, 0.5)
    with pytest.raises(ConfigError):
        MixSpec(48, 1.5)
    assert MixSpec(48, 0.5).n_current == 24


def _current_and_store():
    current = TaskRings(100)
    for i in range(20):
        current.push(tr(i, env=SPECS[5]))
    store = LongTermStore(50)
    rng = np.random.default_rng(0)
    for env in SPECS[:3]:
        for task in (TaskId.TopLeft, TaskId.Center):
            select_into_longterm(store, (env, task), [tr(i, task=task, env=env) for i in range(30)], rng)
    return current, store


def test_mixed_sample_empty_store_is_current_only():
    current, _ = _current_and_store()
    batch = mixed_sample(current, LongTermStore(10), MixSpec(48, 0.5), np.random.default_rng(0))
    assert len(batch) == 48 and all(t.env == SPECS[5] for t in batch)


def test_mixed_sample_full_current_fraction():
    current, store = _current_and_store()
    batch = mixed_sample(current, store, MixSpec(48, 1.0), np.random.default_rng(0))
    assert all(t.env == SPECS[5] for t in batch)


def mixed_split_counts(draws=1000, seed=0):
    """(current, historical) counts per draw at batch 48, fraction 0.5."""
    current, store = _current_and_store()
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(draws):
        batch = mixed_sample(current, store, MixSpec(48, 0.5), rng)
        cur = sum(t.env == SPECS[5] for t in batch)
        out.append((cur, len(batch) - cur))
    return out


def test_mixed_sample_exact_split():
    assert set(mixed_split_counts(200)) == {(24, 24)}


def test_mixed_sample_uniform_over_keys():
    current, store = _current_and_store()
    rng = np.random.default_rng(3)
    hist = []
    for _ in range(200):
        hist += [(t.env, t.task) for t in mixed_sample(current, store, MixSpec(48, 0.5), rng)[24:]]
    keys = store.keys()
    assert set(hist) <= set(keys)
    counts = [hist.count(k) for k in keys]
    assert stats.chisquare(counts).pvalue > 0.01


def test_batches_do_not_alias_storage():
    current, store = _current_and_store()
    snapshot = {k: list(v) for k, v in store.reservoirs.items()}
    batch = mixed_sample(current, store, MixSpec(48, 0.5), np.random.default_rng(0))
    batch.clear()
    assert {k: list(v) for k, v in store.reservoirs.items()} == snapshot
    t = mixed_sample(current, store, MixSpec(4, 0.5), np.random.default_rng(0))[0]
    with pytest.raises(dataclasses.FrozenInstanceError):
        t.r = 5.0
