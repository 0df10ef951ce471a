"""
Deduplicating two near-identical datasets
=========================================

Load a ~340 KB CSV file, change one word in one row, and load the result as
a second dataset. Rows are tree entries, tree nodes are chunks, and chunks
are addressed by their SHA-256 digest, so the second load only stores the
nodes on the path to the edited row.

Run with ``python demos/dedup_demo.py``.
"""

import random
import tempfile
from pathlib import Path

from branchstore import ChunkerConfig, Repository
from branchstore.diff_merge import diff

rng = random.Random(1)
words = "alpha bravo charlie delta echo foxtrot golf hotel india juliet kilo lima".split()

# about 5000 rows of id, name, city, free text and an amount
lines = ["id,name,city,notes,amount"]
for i in range(5000):
    notes = " ".join(rng.choice(words) for _ in range(5))
    lines.append(f"{i:07d},user{rng.randrange(10**8):08d},{rng.choice(words).title()},"
                 f"{notes},{rng.uniform(0, 10000):.3f}")
first = ("\n".join(lines) + "\n").encode()

# the second file differs from the first by a single word in one row
row = lines[2345 + 1]
notes = row.split(",")[3]
edited = row.replace(notes, "zulu" + notes[notes.index(" "):])
second = first.replace(row.encode(), edited.encode())

workdir = Path(tempfile.mkdtemp())
(workdir / "dataset1.csv").write_bytes(first)
(workdir / "dataset2.csv").write_bytes(second)
print(f"CSV size: {len(first) / 1000:.2f} KB")

# Smaller nodes than the library default (q=9: ~512-byte leaves) keep the
# rewritten path short; try ChunkerConfig() to see the effect of 4 KiB leaves.
for config in (ChunkerConfig(q=9), ChunkerConfig()):
    repo = Repository.memory(config)
    _, one = repo.load_csv(workdir / "dataset1.csv", "Dataset-1", "id")
    _, two = repo.load_csv(workdir / "dataset2.csv", "Dataset-2", "id")
    print(f"q={config.q:2d}: Dataset-1 adds {one.new_payload_bytes / 1000:8.2f} KB "
          f"in {one.new_chunks} chunks, Dataset-2 adds {two.new_payload_bytes / 1000:6.2f} KB "
          f"in {two.new_chunks} chunks ({two.new_payload_bytes / one.new_payload_bytes:.2%})")

# the two datasets differ in exactly one row
changes = diff(repo.tree("Dataset-1"), repo.tree("Dataset-2"), repo.store)
for line in changes.lines():
    print(line)
