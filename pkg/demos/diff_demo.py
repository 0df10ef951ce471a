"""
Branches, differential queries and merges
=========================================

A map of 10,000 entries is branched, both branches are edited, and the two
are compared and merged. Diff only descends into subtrees whose ids differ,
so its cost follows the number of changes rather than the size of the map.
"""

import random

from branchstore import Repository
from branchstore.diff_merge import DiffStats

rng = random.Random(7)
repo = Repository.memory()

base = {b"item-%05d" % i: b"price=%d" % rng.randrange(1000) for i in range(10_000)}
repo.put("catalog", base, message="initial catalog")

# branching copies no data: the new branch points at the same version
repo.branch("catalog", "summer-sale")
print("chunks after branching:", repo.stat().chunk_count)

sale = {k: b"price=1" for k in rng.sample(sorted(base), 20)}
repo.update("catalog", set=sale, branch="summer-sale", message="sale prices")
repo.update("catalog", set={b"item-10000": b"price=42"}, message="new item")

stats = DiffStats()
changes = repo.diff("catalog", "master", "summer-sale", stats)
print(changes.summary())
print(f"nodes visited: {stats.node_visits}, identical subtrees skipped: {stats.pruned}")

# the two edits touch different keys, so the merge is clean
result = repo.merge("catalog", "master", "summer-sale")
print("merge:", result.status, result.uid)
for uid, node in repo.log("catalog", limit=3):
    print(f"  {uid}  bases={len(node.bases)}  {node.message}")

# conflicting edits to the same key are reported, not resolved
repo.branch("catalog", "audit")
repo.update("catalog", set={b"item-00001": b"price=5"}, message="fix")
repo.update("catalog", set={b"item-00001": b"price=6"}, branch="audit", message="other fix")
print(repo.merge("catalog", "master", "audit"))
