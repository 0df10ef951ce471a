import pytest
from hypothesis import given, settings, strategies as st

from branchstore import pos_tree as pt
from branchstore.chunk_store import MemoryStore
from branchstore.chunker import ChunkerConfig
from branchstore.diff_merge import DiffStats, diff, escape, merge3, unescape

import oracles
from conftest import random_entries


def perturb(rng, entries, count):
    out = dict(entries)
    keys = sorted(entries)
    for i, op in enumerate(rng.choices("+-~", k=count)):
        if op == "+":
            out[rng.randbytes(12)] = rng.randbytes(20)
        elif op == "-":
            out.pop(rng.choice(keys), None)
        else:
            out[rng.choice(keys)] = b"changed-%d" % i
    return out


def as_oracle(result):
    return (
        sorted(result.added),
        sorted(result.removed),
        sorted(result.modified),
    )


def test_identical_trees_cost_one_comparison(store, rng):
    tree = pt.build(random_entries(rng, 1000), store)
    stats = DiffStats()
    result = diff(tree, tree, store, stats)
    assert not result and len(result) == 0
    assert stats.comparisons == 1 and stats.node_visits == 0


def test_single_addition(store):
    a = pt.build({b"a": b"1"}, store)
    b = pt.build({b"a": b"1", b"b": b"2"}, store)
    result = diff(a, b, store)
    assert result.added == [(b"b", b"2")]
    assert not result.removed and not result.modified


def test_perturbation_matches_oracle(store, rng):
    base = random_entries(rng, 10_000)
    a = pt.build(base, store)
    for _ in range(5):
        other = perturb(rng, base, 100)
        b = pt.build(other, store)
        stats = DiffStats()
        result = diff(a, b, store, stats)
        assert as_oracle(result) == oracles.set_diff(base, other)
        assert result.apply(base) == other
        # visits bounded by the number of changed entries times the heights
        assert stats.node_visits <= 4 * len(result) * (a.height + b.height)


def test_diff_symmetry(store, rng):
    base = random_entries(rng, 2000)
    other = perturb(rng, base, 30)
    a, b = pt.build(base, store), pt.build(other, store)
    ab, ba = diff(a, b, store), diff(b, a, store)
    assert ab.added == ba.removed and ab.removed == ba.added
    assert ab.modified == [(k, y, x) for k, x, y in ba.modified]


def test_diff_different_heights(store, rng, small_config):
    big = random_entries(rng, 3000)
    small = dict(list(sorted(big.items()))[:5])
    a, b = pt.build(small, store, small_config), pt.build(big, store, small_config)
    assert a.height < b.height
    assert as_oracle(diff(a, b, store)) == oracles.set_diff(small, big)
    assert as_oracle(diff(b, a, store)) == oracles.set_diff(big, small)


def test_diff_empty(store, rng):
    entries = random_entries(rng, 500)
    empty, full = pt.build({}, store), pt.build(entries, store)
    assert sorted(diff(empty, full, store).added) == sorted(entries.items())
    assert sorted(diff(full, empty, store).removed) == sorted(entries.items())


@settings(max_examples=40, deadline=None)
@given(
    a=st.dictionaries(st.binary(min_size=1, max_size=4), st.binary(max_size=8), max_size=200),
    b=st.dictionaries(st.binary(min_size=1, max_size=4), st.binary(max_size=8), max_size=200),
)
def test_diff_property(a, b):
    store = MemoryStore()
    config = ChunkerConfig(k=4, q=5)
    result = diff(pt.build(a, store, config), pt.build(b, store, config), store)
    assert as_oracle(result) == oracles.set_diff(a, b)


# -- merge -----------------------------------------------------------------

def test_merge_trivial_cases(store, rng):
    c = pt.build(random_entries(rng, 300), store)
    a = pt.build(random_entries(rng, 300), store)
    b = pt.build(random_entries(rng, 300), store)
    assert merge3(c, c, b, store).merged == b
    assert merge3(c, a, c, store).merged == a
    assert merge3(c, a, a, store).merged == a


def test_disjoint_merge_matches_oracle(rng, small_config):
    store = MemoryStore()
    base = random_entries(rng, 2000)
    keys = sorted(base)
    for trial in range(30):
        left = dict(base)
        right = dict(base)
        for k in rng.sample(keys[:1000], 10):
            left[k] = b"L%d" % trial
        for k in rng.sample(keys[1000:], 10):
            right[k] = b"R%d" % trial
        left[b"new-left-%d" % trial] = b"x"
        del right[keys[-1 - trial]]
        t = [pt.build(d, store, small_config) for d in (base, left, right)]
        expected, conflicts = oracles.merge3(base, left, right)
        assert conflicts == []
        out = merge3(*t, store, small_config)
        assert out.ok and out.merged == pt.build(expected, MemoryStore(), small_config)
        assert dict(pt.iter_entries(out.merged, store)) == expected
        # commutative
        assert merge3(t[0], t[2], t[1], store, small_config).merged == out.merged


def test_identical_changes_do_not_conflict(store, rng):
    base = random_entries(rng, 500)
    k = sorted(base)[7]
    left = {**base, k: b"same"}
    right = {**base, k: b"same", b"extra": b"e"}
    out = merge3(*(pt.build(d, store) for d in (base, left, right)), store)
    assert out.ok
    assert dict(pt.iter_entries(out.merged, store)) == right


def test_conflicts_reported_exactly(store, rng):
    base = random_entries(rng, 1000)
    keys = sorted(base)
    clash = rng.sample(keys, 5)
    left, right = dict(base), dict(base)
    for k in clash:
        left[k] = b"left"
        right[k] = b"right"
    del left[keys[0]]
    right[keys[0]] = b"edited"
    out = merge3(*(pt.build(d, store) for d in (base, left, right)), store)
    assert not out.ok
    assert out.conflicts == sorted(clash + [keys[0]])
    assert out.conflicts == oracles.merge3(base, left, right)[1]


def test_merge_idempotent(store, rng):
    base = random_entries(rng, 500)
    left = {**base, b"only-left": b"1"}
    t = [pt.build(d, store) for d in (base, left, base)]
    merged = merge3(*t, store).merged
    assert merge3(t[0], merged, t[1], store).merged == merged


def test_merge_write_bound(rng):
    store = MemoryStore()
    base = random_entries(rng, 10_000)
    keys = sorted(base)
    left = {**base, keys[10]: b"left", keys[5000]: b"left"}
    right = {**base, keys[9000]: b"right"}
    t = [pt.build(d, store) for d in (base, left, right)]
    before = store.stats().chunk_count
    out = merge3(*t, store)
    written = store.stats().chunk_count - before
    assert out.ok
    assert written <= 4 * 3 * max(x.height for x in t)


def test_escape_round_trip():
    for raw in [b"plain", b"", b"tab\there", b"line\n", b"\xff\x00", b"hex:abc", "café".encode()]:
        assert unescape(escape(raw)) == raw
    assert escape(b"plain") == "plain"
    assert escape(b"a\tb") == "hex:610962"
    assert escape(b"hex:1") == "hex:6865783a31"


def test_diff_lines_format(store):
    a = pt.build({b"a": b"1", b"b": b"2", b"c": b"3"}, store)
    b = pt.build({b"a": b"1", b"b": b"9", b"d": b"4"}, store)
    result = diff(a, b, store)
    assert list(result.lines()) == ["~ b\t2\t9", "- c\t3", "+ d\t4"]
    assert result.summary() == "1 added, 1 removed, 1 modified"
