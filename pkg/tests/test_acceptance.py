"""End-to-end acceptance checks, one test per criterion.

Each test records a PASS/FAIL line that is printed in the pytest terminal
summary. Run alone with ``pytest tests/test_acceptance.py -v``.
"""

import math
import os
import random
import shutil
import signal
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from branchstore import pos_tree as pt
from branchstore import version
from branchstore.chunk_store import MemoryStore
from branchstore.chunker import ChunkerConfig, get_chunker
from branchstore.diff_merge import DiffStats, diff, merge3
from branchstore.repository import Repository

import oracles
from conftest import random_entries

# the dedup demo runs at smaller nodes than the library default; see README
DEMO_CONFIG = ChunkerConfig(q=9)
HERE = Path(__file__).parent
WORDS = ("alpha bravo charlie delta echo foxtrot golf hotel india juliet kilo lima "
         "mike november oscar papa quebec romeo sierra tango uniform victor").split()


def verdict(record, number, ok, detail):
    record(f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}")
    return ok


def demo_csv(rng, rows=5000):
    lines = ["id,name,city,notes,amount"]
    for i in range(rows):
        notes = " ".join(rng.choice(WORDS) for _ in range(5))
        lines.append(f"{i:07d},user{rng.randrange(10**8):08d},{rng.choice(WORDS).title()},"
                     f"{notes},{rng.uniform(0, 10000):.3f}")
    return ("\n".join(lines) + "\n").encode()


def dedup_ratio(tmp_path, config, seed):
    rng = random.Random(seed)
    first = demo_csv(rng)
    row = rng.randrange(5000)
    start = first.index(b"\n%07d," % row) + 1
    end = first.index(b"\n", start)
    line = first[start:end]
    word = next(w for w in WORDS if f",{w} ".encode() in line or f" {w} ".encode() in line)
    edited = line.replace(f" {word} ".encode(), b" zulu ", 1) if f" {word} ".encode() in line \
        else line.replace(f",{word} ".encode(), b",zulu ", 1)
    second = first[:start] + edited + first[end:]
    assert len(second) == len(first) - len(word) + 4
    a, b = tmp_path / f"d1-{seed}.csv", tmp_path / f"d2-{seed}.csv"
    a.write_bytes(first)
    b.write_bytes(second)
    repo = Repository.memory(config)
    _, r1 = repo.load_csv(a, "Dataset-1", "id")
    _, r2 = repo.load_csv(b, "Dataset-2", "id")
    return len(first), r1.new_payload_bytes, r2.new_payload_bytes


def test_1_dedup_demo(tmp_path, record):
    t0 = time.perf_counter()
    size, first, second = dedup_ratio(tmp_path, DEMO_CONFIG, seed=1)
    elapsed = time.perf_counter() - t0
    ratio = second / first
    _, f12, s12 = dedup_ratio(tmp_path, ChunkerConfig(), seed=1)
    ok = ratio < 0.02 and elapsed < 5 and 300_000 <= size <= 380_000
    verdict(record, 1, ok,
            f"csv {size / 1000:.1f} KB; first load {first / 1000:.2f} KB, second {second / 1000:.2f} KB, "
            f"ratio {ratio:.2%} (< 2%) at q={DEMO_CONFIG.q}, {elapsed:.2f} s (< 5 s); "
            f"library default q=12 gives {s12 / f12:.2%} for reference")
    assert ok


def test_2_structural_invariance(record):
    rng = random.Random(2)
    # the second config gives trees up to five levels deep
    configs = [ChunkerConfig(), ChunkerConfig(q=10)]
    t0 = time.perf_counter()
    same = 0
    trials = 1000
    for trial in range(trials):
        config = configs[trial % 2]
        n = int(math.exp(rng.uniform(0, math.log(10_000))))
        entries = list(random_entries(rng, n, value_len=rng.choice((8, 20, 60))).items())
        store = MemoryStore()
        batch = pt.build(entries, store, config)
        # history 1: shuffled insertions in a few batches
        order = entries[:]
        rng.shuffle(order)
        t1 = pt.build([], store, config)
        cuts = sorted(rng.sample(range(1, n), min(n - 1, 5))) if n > 1 else []
        for lo, hi in zip([0] + cuts, cuts + [n]):
            t1 = pt.update(t1, store, config, set=order[lo:hi])
        # history 2: a different order with wrong values and extra keys, later fixed up
        rng.shuffle(order)
        half = order[: n // 2]
        extra = random_entries(rng, max(1, n // 10))
        t2 = pt.build([(k, b"stale") for k, _ in half] + list(extra.items()), store, config)
        wanted = dict(entries)
        t2 = pt.update(t2, store, config, set=order, delete=[k for k in extra if k not in wanted])
        same += batch == t1 == t2
    elapsed = time.perf_counter() - t0
    ok = same == trials and elapsed < 60
    verdict(record, 2, ok, f"{same}/{trials} identical roots across three histories, {elapsed:.1f} s (< 60 s)")
    assert ok


def test_3_recursive_identity(record):
    rng = random.Random(3)
    store = MemoryStore()
    trees = [pt.build(random_entries(rng, 10_000), store) for _ in range(4)]
    worst = 0.0
    compliant = 0
    for trial in range(200):
        tree = trees[trial % 4]
        nodes_before = store.stats().chunk_count
        pt.insert(tree, rng.randbytes(12), rng.randbytes(20), store)
        written = store.stats().chunk_count - nodes_before
        compliant += written <= 3 * tree.height
        worst = max(worst, written / tree.height)
    ok = compliant == 200
    verdict(record, 3, ok, f"{compliant}/200 inserts within 3 x height new chunks "
                           f"(heights {sorted({t.height for t in trees})}, worst {worst:.2f} x height)")
    assert ok


def test_4_diff_complexity(record):
    rng = random.Random(4)
    store = MemoryStore()
    failures = 0
    worst = 0.0
    trials = 0
    for d in (1, 10, 100):
        for _ in range(10):
            # 100-byte values give ~300 leaves, enough for D = 100 distinct ones
            base = random_entries(rng, 10_000, value_len=100)
            a = pt.build(base, store)
            # one edited entry in each of d distinct leaves
            leaves = pt.leaf_ids(a, store)
            chosen = rng.sample(leaves, d)
            other = dict(base)
            for leaf in chosen:
                _, items = pt.decode_node(store.get_chunk(leaf).payload)
                key = rng.choice(items)[0]
                other[key] = b"edited"
            b = pt.build(other, store)
            stats = DiffStats()
            result = diff(a, b, store, stats)
            bound = 4 * d * (a.height + b.height)
            exact = (sorted(result.added), sorted(result.removed), sorted(result.modified)) \
                == oracles.set_diff(base, other)
            failures += not (exact and stats.node_visits <= bound)
            worst = max(worst, stats.node_visits / bound)
            trials += 1
    ok = failures == 0
    verdict(record, 4, ok, f"{trials - failures}/{trials} diffs exact and within 4*D*(ha+hb) visits "
                           f"(worst {worst:.2f} of bound)")
    assert ok


def test_5_three_way_merge(record):
    rng = random.Random(5)
    configs = [ChunkerConfig(), ChunkerConfig(k=8, q=7)]
    clean = 0
    for trial in range(500):
        config = configs[trial % 2]
        store = MemoryStore()
        base = random_entries(rng, rng.randint(1, 3000))
        keys = sorted(base)
        rng.shuffle(keys)
        split = len(keys) // 2
        a, b = dict(base), dict(base)
        for side, pool in ((a, keys[:split]), (b, keys[split:])):
            for k in pool[: rng.randint(0, 20)]:
                if rng.random() < 0.3:
                    del side[k]
                else:
                    side[k] = rng.randbytes(rng.randint(0, 40))
            side.update(random_entries(rng, rng.randint(0, 10)))
        expected, conflicts = oracles.merge3(base, a, b)
        trees = [pt.build(x, store, config) for x in (base, a, b)]
        out = merge3(*trees, store, config)
        clean += (not conflicts and out.ok
                  and out.merged == pt.build(expected, MemoryStore(), config)
                  and dict(pt.iter_entries(out.merged, store)) == expected)
    exact = 0
    for trial in range(100):
        config = configs[trial % 2]
        store = MemoryStore()
        base = random_entries(rng, rng.randint(20, 3000))
        keys = sorted(base)
        overlap = rng.sample(keys, rng.randint(1, 10))
        a, b = dict(base), dict(base)
        for k in overlap:
            choice = rng.random()
            if choice < 0.2:
                del a[k]
                b[k] = b"b-side"
            else:
                a[k] = b"a-side"
                b[k] = b"b-side"
        a[b"\xff only in a"] = b"1"
        expected, conflicts = oracles.merge3(base, a, b)
        out = merge3(*(pt.build(x, store, config) for x in (base, a, b)), store, config)
        exact += not out.ok and out.conflicts == sorted(overlap) == conflicts
    ok = clean == 500 and exact == 100
    verdict(record, 5, ok, f"{clean}/500 disjoint merges equal oracle and build(); "
                           f"{exact}/100 conflicting merges report exactly the overlapping keys")
    assert ok


def test_6_tamper_evidence(record):
    rng = random.Random(6)
    repo = Repository.memory(ChunkerConfig(k=8, q=6))
    entries = random_entries(rng, 60, key_len=8, value_len=16)
    repo.put("t", entries, message="one")
    repo.update("t", set={b"extra-key": b"v" * 200}, message="two")
    repo.update("t", delete=sorted(entries)[:5], message="three")
    uid = repo.head("t")
    t0 = time.perf_counter()
    clean = version.verify(uid, repo.store)
    reachable = dict(repo.store.chunks)
    flips = passes = misnamed = 0
    for cid, (kind, payload) in reachable.items():
        raw = bytes([kind]) + payload
        for pos in range(len(raw)):
            bad = raw[:pos] + bytes([raw[pos] ^ 0xFF]) + raw[pos + 1:]
            repo.store.chunks[cid] = (bad[0], bad[1:])
            report = version.verify(uid, repo.store)
            flips += 1
            passes += report.ok
            misnamed += not report.ok and report.bad_chunk != cid
        repo.store.chunks[cid] = (kind, payload)
    after = version.verify(uid, repo.store)
    elapsed = time.perf_counter() - t0
    ok = (clean.ok and after.ok and passes == 0 and misnamed == 0 and elapsed < 120
          and clean.chunks_checked == len(reachable) and clean.versions_checked == 3)
    verdict(record, 6, ok, f"{flips} single-byte flips over {len(reachable)} chunks: {passes} false passes, "
                           f"{misnamed} misnamed, clean store {'passes' if clean.ok else 'FAILS'}; "
                           f"{elapsed:.1f} s (< 120 s)")
    assert ok


def test_7_chunker_statistics(record):
    rng = np.random.default_rng(7)
    config = ChunkerConfig(q=12)
    sizes = rng.integers(16, 200, size=80_000)
    blob = rng.integers(0, 256, size=int(sizes.sum()), dtype=np.uint8).tobytes()
    offsets = np.concatenate(([0], np.cumsum(sizes)))
    entries = [blob[offsets[i]:offsets[i + 1]] for i in range(len(sizes))]
    total = len(blob)
    splits = get_chunker(config).segment(entries).splits
    ends = offsets[np.array(splits)]
    seg_bytes = np.diff(np.concatenate(([0], ends)))
    mean = float(seg_bytes.mean())
    largest = int(seg_bytes.max())
    lo, hi = 0.6 * 4096, 1.8 * 4096
    ok = total >= 8 << 20 and lo <= mean <= hi and largest <= config.max_node_bytes + int(sizes.max())
    verdict(record, 7, ok, f"{total / 2**20:.2f} MiB in {len(seg_bytes)} segments: mean {mean:.0f} B "
                           f"(within [{lo:.0f}, {hi:.0f}]), max {largest} B (limit {config.max_node_bytes})")
    assert ok


@pytest.mark.slow
def test_8_crash_safety(tmp_path, record):
    rng = random.Random(8)
    template = tmp_path / "template"
    rows = ["id,payload"] + [f"{i:06d},{rng.randbytes(40).hex()}" for i in range(20_000)]
    first = tmp_path / "first.csv"
    first.write_text("\n".join(rows) + "\n")
    second_rows = rows[:1] + [r if i % 7 else r + "x" for i, r in enumerate(rows[1:])]
    second_rows += [f"{i:06d},{rng.randbytes(40).hex()}" for i in range(20_000, 25_000)]
    second = tmp_path / "second.csv"
    second.write_text("\n".join(second_rows) + "\n")

    with Repository.init(template, ChunkerConfig(q=9)) as repo:
        pre, _ = repo.load_csv(first, "table", "id")
    env = {**os.environ, "PYTHONPATH": os.pathsep.join([str(HERE.parent / "src"), os.environ.get("PYTHONPATH", "")])}

    def launch(store):
        proc = subprocess.Popen([sys.executable, str(HERE / "crash_loader.py"), str(store), str(second)],
                                stdout=subprocess.PIPE, env=env, text=True)
        assert proc.stdout.readline().strip() == "ready"
        return proc

    # a full run gives the post-load head and the load duration
    reference = tmp_path / "reference"
    shutil.copytree(template, reference)
    proc = launch(reference)
    t0 = time.perf_counter()
    post = proc.stdout.readline().strip()
    duration = time.perf_counter() - t0
    proc.wait()

    outcomes = {"pre": 0, "post": 0, "torn": 0}
    for trial in range(20):
        store = tmp_path / f"crash{trial}"
        shutil.copytree(template, store)
        proc = launch(store)
        # some kill points fall after the commit
        time.sleep(rng.uniform(0, duration * 1.25))
        proc.send_signal(signal.SIGKILL)
        proc.wait()
        proc.stdout.close()
        # simulate a torn final write on top of the kill for half the trials
        if trial % 2:
            with open(store / "chunks.log", "ab") as f:
                f.write(b"\x40\x00\x00\x00\x01partial")
        with Repository.open(store) as repo:
            head = str(repo.head("table"))
            intact = repo.verify("table").ok
            expected_rows = {str(pre): 20_000, post: 25_000}.get(head)
            complete = expected_rows is not None and len(repo.select("table")) == expected_rows
        if intact and complete and head == str(pre):
            outcomes["pre"] += 1
        elif intact and complete and head == post:
            outcomes["post"] += 1
        else:
            outcomes["torn"] += 1
    ok = outcomes["torn"] == 0
    verdict(record, 8, ok, f"20 SIGKILLs over a {duration:.2f} s load: {outcomes['pre']} recovered pre-load, "
                           f"{outcomes['post']} post-load, {outcomes['torn']} torn")
    assert ok
