"""
Detecting tampering
===================

Every chunk id is the SHA-256 of its content, and a version id covers the
root of its value and the ids of its parent versions. ``verify`` re-hashes
everything reachable from a version, so a single flipped byte anywhere in
the history is caught and the damaged chunk is named.
"""

import tempfile
from pathlib import Path

from branchstore import Repository

path = Path(tempfile.mkdtemp()) / "store"
with Repository.init(path) as repo:
    repo.put("ledger", {b"alice": b"100", b"bob": b"50"}, message="opening balances")
    repo.update("ledger", set={b"alice": b"90", b"bob": b"60"}, message="alice pays bob 10")
    repo.update("ledger", set={b"carol": b"5"}, message="carol joins")
    print("clean store:", repo.verify("ledger"))

# rewrite history behind the store's back: bob's opening balance 50 becomes 90
# (the entry is stored as key, a tag byte, a 4-byte length and the value)
log = path / "chunks.log"
data = log.read_bytes()
entry = b"bob" + b"\x00" + (2).to_bytes(4, "little") + b"50"
assert data.count(entry) == 1
log.write_bytes(data.replace(entry, entry[:-2] + b"90"))

with Repository.open(path) as repo:
    report = repo.verify("ledger")
    print("after tampering:", "ok" if report.ok else f"FAILED at {report.bad_chunk}: {report.reason}")
    # the newest version alone still checks out; the damage is in its history
    print("head only:", repo.verify("ledger", depth_limit=0).ok)
