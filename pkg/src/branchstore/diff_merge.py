"""Differential queries and three-way merge over trees.

Diff walks both trees top-down one level at a time. At every level the node
ids present on both sides are cancelled, because equal ids mean equal
subtrees; only the survivors are expanded. Leaves that survive to the bottom
are compared entry by entry.

Merge diffs both sides against the base, checks the two change sets for
conflicting keys, then applies the smaller change set to the other side with
an incremental tree update. Untouched subtrees are carried over by id.
"""

from __future__ import annotations

import string
from dataclasses import dataclass, field
from typing import Iterator

from .chunk_store import ChunkStore
from .chunker import ChunkerConfig
from .pos_tree import TreeRef, _apply, _Nodes, child_id, entry_value

# (key, item in A or None, item in B or None)
Change = tuple[bytes, "bytes | None", "bytes | None"]


@dataclass
class DiffStats:
    """Instrumentation filled in by :func:`diff`."""

    comparisons: int = 0
    node_visits: int = 0
    pruned: int = 0


@dataclass
class DiffResult:
    added: list[tuple[bytes, bytes]] = field(default_factory=list)
    removed: list[tuple[bytes, bytes]] = field(default_factory=list)
    modified: list[tuple[bytes, bytes, bytes]] = field(default_factory=list)

    def __bool__(self):
        return bool(self.added or self.removed or self.modified)

    def __len__(self):
        return len(self.added) + len(self.removed) + len(self.modified)

    def apply(self, entries: dict[bytes, bytes]) -> dict[bytes, bytes]:
        """Return ``entries`` with this diff applied (does not mutate)."""
        out = dict(entries)
        for key, _ in self.removed:
            del out[key]
        for key, value in self.added:
            out[key] = value
        for key, _, new in self.modified:
            out[key] = new
        return out

    def lines(self) -> Iterator[str]:
        """Render as ``+``/``-``/``~`` lines in key order."""
        rows = [(k, f"+ {escape(k)}\t{escape(v)}") for k, v in self.added]
        rows += [(k, f"- {escape(k)}\t{escape(v)}") for k, v in self.removed]
        rows += [(k, f"~ {escape(k)}\t{escape(a)}\t{escape(b)}") for k, a, b in self.modified]
        rows.sort(key=lambda r: r[0])
        for _, line in rows:
            yield line

    def summary(self) -> str:
        return f"{len(self.added)} added, {len(self.removed)} removed, {len(self.modified)} modified"


@dataclass
class MergeOutcome:
    merged: TreeRef | None = None
    conflicts: list[bytes] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return self.merged is not None


_PRINTABLE = set(string.printable) - set("\t\n\r\x0b\x0c")


def escape(value: bytes) -> str:
    """Text as-is when printable UTF-8 without tabs or newlines, else ``hex:...``."""
    try:
        text = value.decode("utf-8")
    except UnicodeDecodeError:
        return "hex:" + value.hex()
    if text.startswith("hex:") or not all(c in _PRINTABLE or (ord(c) > 127 and c.isprintable()) for c in text):
        return "hex:" + value.hex()
    return text


def unescape(text: str) -> bytes:
    if text.startswith("hex:"):
        return bytes.fromhex(text[4:])
    return text.encode("utf-8")


def diff_items(a: TreeRef, b: TreeRef, store: ChunkStore,
               stats: DiffStats | None = None) -> list[Change]:
    """Changed entries between ``a`` and ``b`` as raw serialized items."""
    stats = stats if stats is not None else DiffStats()
    stats.comparisons += 1
    if a.root == b.root:
        stats.pruned += 1
        return []
    nodes = _Nodes(store, None)
    la, lb = a.height - 1, b.height - 1
    side_a: list[bytes] = [a.root]
    side_b: list[bytes] = [b.root]

    def expand(ids, level):
        stats.node_visits += len(ids)
        return [child_id(enc) for cid in ids for _, enc in nodes.load(cid, level)]

    while True:
        if la == lb:
            common = set(side_a).intersection(side_b)
            stats.comparisons += len(side_a) + len(side_b)
            if common:
                stats.pruned += len(common)
                side_a = [c for c in side_a if c not in common]
                side_b = [c for c in side_b if c not in common]
            if la == 0 or not (side_a or side_b):
                break
            side_a, side_b = expand(side_a, la), expand(side_b, lb)
            la, lb = la - 1, lb - 1
        elif la > lb:
            side_a, la = expand(side_a, la), la - 1
        else:
            side_b, lb = expand(side_b, lb), lb - 1

    stats.node_visits += len(side_a) + len(side_b)
    items_a = [it for cid in side_a for it in nodes.load(cid, 0)]
    items_b = [it for cid in side_b for it in nodes.load(cid, 0)]

    out: list[Change] = []
    i = j = 0
    while i < len(items_a) or j < len(items_b):
        ka = items_a[i][0] if i < len(items_a) else None
        kb = items_b[j][0] if j < len(items_b) else None
        if kb is None or (ka is not None and ka < kb):
            out.append((ka, items_a[i][1], None))
            i += 1
        elif ka is None or kb < ka:
            out.append((kb, None, items_b[j][1]))
            j += 1
        else:
            if items_a[i][1] != items_b[j][1]:
                out.append((ka, items_a[i][1], items_b[j][1]))
            i += 1
            j += 1
    return out


def iter_diff(a: TreeRef, b: TreeRef, store: ChunkStore,
              stats: DiffStats | None = None) -> Iterator[tuple[str, bytes, bytes | None, bytes | None]]:
    """Yield ``(op, key, value_a, value_b)`` in key order; op is ``+``, ``-`` or ``~``."""
    for key, old, new in diff_items(a, b, store, stats):
        va = entry_value(store, old) if old is not None else None
        vb = entry_value(store, new) if new is not None else None
        op = "+" if old is None else "-" if new is None else "~"
        yield op, key, va, vb


def diff(a: TreeRef, b: TreeRef, store: ChunkStore, stats: DiffStats | None = None) -> DiffResult:
    result = DiffResult()
    for op, key, va, vb in iter_diff(a, b, store, stats):
        if op == "+":
            result.added.append((key, vb))
        elif op == "-":
            result.removed.append((key, va))
        else:
            result.modified.append((key, va, vb))
    return result


def merge3(base: TreeRef, a: TreeRef, b: TreeRef, store: ChunkStore,
           config: ChunkerConfig | None = None) -> MergeOutcome:
    """Three-way merge of ``a`` and ``b`` against common ancestor ``base``.

    A key changed on one side takes that side's value; a key changed
    identically on both sides takes the shared value; a key changed
    differently on both sides (deletion counts as a change) is a conflict.
    """
    if a.root == base.root or a.root == b.root:
        return MergeOutcome(b)
    if b.root == base.root:
        return MergeOutcome(a)
    delta_a = {k: new for k, _, new in diff_items(base, a, store)}
    delta_b = {k: new for k, _, new in diff_items(base, b, store)}
    conflicts = sorted(k for k in delta_a.keys() & delta_b.keys() if delta_a[k] != delta_b[k])
    if conflicts:
        return MergeOutcome(None, conflicts)
    if len(delta_b) <= len(delta_a):
        target, edits = a, delta_b.items() - delta_a.items()
    else:
        target, edits = b, delta_a.items() - delta_b.items()
    return MergeOutcome(_apply(_Nodes(store, config), target, sorted(edits)))
