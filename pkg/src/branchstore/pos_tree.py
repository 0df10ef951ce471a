"""Pattern-oriented-split tree: a Merkle search tree whose node boundaries
come from the content-defined chunker.

Node chunk layout (little-endian)::

    [u8 level][u32 count] then per entry
    [u16 key_len][key][u8 value_tag][u32 value_len][value | 32-byte id]

``value_tag`` is 0 for an inline value, 1 for a value spilled to a raw-blob
chunk and 2 for a child node id. Leaves sit at level 0. Every index entry
carries the largest key of its child's subtree, and a probe descends into the
first child whose split key is >= the probe.

Each level is segmented by the chunker over the serialized entries (headers
excluded). Levels are stacked until one node remains; that node is the root.
Updates rewrite only the nodes between the first touched node and the point
where the new segmentation re-synchronizes with an old node boundary, so the
result is identical, chunk for chunk, to a fresh build of the same entries.
"""

from __future__ import annotations

import bisect
import struct
from dataclasses import dataclass
from typing import Iterable, Iterator, Mapping, Sequence

from .chunk_store import ChunkStore, Kind, NodeId
from .chunker import ChunkerConfig, get_chunker
from .errors import (
    ChunkNotFoundError,
    CorruptChunkError,
    DuplicateKeyError,
    OversizeEntryError,
)

MAX_KEY_BYTES = 1024
MAX_INLINE_VALUE = 64 * 1024

TAG_INLINE = 0
TAG_BLOB = 1
TAG_CHILD = 2

_NODE_HEADER = struct.Struct("<BI")
_KEY_LEN = struct.Struct("<H")
_VALUE_HEAD = struct.Struct("<BI")

# An item is (key, serialized entry bytes). Leaves hold entries; index nodes
# hold child references whose last 32 bytes are the child id.
Item = tuple[bytes, bytes]


@dataclass(frozen=True)
class TreeRef:
    root: NodeId
    height: int = 1
    entry_count: int = 0


def encode_entry(key: bytes, tag: int, value: bytes) -> bytes:
    return b"".join((_KEY_LEN.pack(len(key)), key, _VALUE_HEAD.pack(tag, len(value)), value))


def decode_entry(item: bytes) -> tuple[bytes, int, bytes]:
    (klen,) = _KEY_LEN.unpack_from(item, 0)
    key = item[2:2 + klen]
    tag, vlen = _VALUE_HEAD.unpack_from(item, 2 + klen)
    start = 2 + klen + _VALUE_HEAD.size
    return key, tag, item[start:start + vlen]


def child_id(item: bytes) -> NodeId:
    return NodeId(item[-32:])


def encode_node(level: int, items: Sequence[Item]) -> bytes:
    return _NODE_HEADER.pack(level, len(items)) + b"".join(enc for _, enc in items)


def decode_node(payload: bytes, cid=None) -> tuple[int, list[Item]]:
    """Parse a node chunk, rejecting anything malformed."""
    try:
        level, count = _NODE_HEADER.unpack_from(payload, 0)
        pos = _NODE_HEADER.size
        items = []
        for _ in range(count):
            (klen,) = _KEY_LEN.unpack_from(payload, pos)
            vstart = pos + 2 + klen
            tag, vlen = _VALUE_HEAD.unpack_from(payload, vstart)
            end = vstart + _VALUE_HEAD.size + vlen
            if end > len(payload) or tag > TAG_CHILD:
                raise ValueError("entry overruns node")
            if (tag == TAG_CHILD) != (level > 0) or (tag != TAG_INLINE and vlen != 32):
                raise ValueError("entry tag does not match node level")
            items.append((payload[pos + 2:vstart], payload[pos:end]))
            pos = end
        if pos != len(payload):
            raise ValueError("trailing bytes after last entry")
    except (struct.error, ValueError) as exc:
        raise CorruptChunkError(cid, f"malformed node: {exc}") from None
    return level, items


class _Nodes:
    """Reads and writes tree nodes for one store and chunker config."""

    def __init__(self, store: ChunkStore, config: ChunkerConfig | None):
        self.store = store
        self.config = config or ChunkerConfig()
        self.reads = 0
        self.writes = 0

    def load(self, cid: bytes, level: int | None = None) -> list[Item]:
        try:
            chunk = self.store.get_chunk(cid)
        except ChunkNotFoundError:
            raise CorruptChunkError(NodeId(cid), "dangling node id") from None
        self.reads += 1
        if chunk.kind not in (Kind.LEAF, Kind.INDEX):
            raise CorruptChunkError(NodeId(cid), f"expected a tree node, found {chunk.kind.name}")
        node_level, items = decode_node(chunk.payload, NodeId(cid))
        if (chunk.kind == Kind.LEAF) != (node_level == 0):
            raise CorruptChunkError(NodeId(cid), "chunk kind disagrees with node level")
        if level is not None and node_level != level:
            raise CorruptChunkError(NodeId(cid), f"expected level {level}, found {node_level}")
        return items

    def write(self, level: int, items: Sequence[Item]) -> Item:
        """Store one node and return the index item that references it."""
        kind = Kind.LEAF if level == 0 else Kind.INDEX
        before = self.store.stats().chunk_count
        cid = self.store.put(kind, encode_node(level, items))
        self.writes += self.store.stats().chunk_count - before
        split_key = items[-1][0] if items else b""
        return split_key, encode_entry(split_key, TAG_CHILD, cid)

    def chunker(self, level: int):
        return get_chunker(self.config.for_level(level))

    def write_level(self, level: int, items: Sequence[Item]) -> list[Item]:
        splits = self.chunker(level).segment([enc for _, enc in items]).splits
        refs = []
        start = 0
        for end in splits:
            refs.append(self.write(level, items[start:end]))
            start = end
        return refs

    def stack(self, level: int, refs: list[Item]) -> tuple[NodeId, int]:
        """Build index levels above ``refs`` until a single root remains."""
        while len(refs) > 1:
            level += 1
            refs = self.write_level(level, refs)
        return child_id(refs[0][1]), level + 1


def _entry_item(nodes: _Nodes, key: bytes, value: bytes) -> Item:
    if not key:
        raise ValueError("keys must be non-empty")
    if len(key) > MAX_KEY_BYTES:
        raise OversizeEntryError(f"key of {len(key)} bytes exceeds {MAX_KEY_BYTES}")
    value = bytes(value)
    enc = encode_entry(key, TAG_INLINE, value)
    if len(value) > MAX_INLINE_VALUE or len(enc) > nodes.config.max_node_bytes:
        blob = nodes.store.put(Kind.BLOB, value)
        enc = encode_entry(key, TAG_BLOB, blob)
        if len(enc) > nodes.config.max_node_bytes:
            raise OversizeEntryError(
                f"entry for key of {len(key)} bytes cannot fit in a "
                f"{nodes.config.max_node_bytes}-byte node")
    return bytes(key), enc


def entry_value(store: ChunkStore, enc: bytes) -> bytes:
    key, tag, value = decode_entry(enc)
    if tag == TAG_BLOB:
        try:
            chunk = store.get_chunk(value)
        except ChunkNotFoundError:
            raise CorruptChunkError(NodeId(value), "dangling value blob") from None
        if chunk.kind != Kind.BLOB:
            raise CorruptChunkError(NodeId(value), "value id does not name a blob")
        return chunk.payload
    return value


def _sorted_items(nodes: _Nodes, entries) -> list[Item]:
    if isinstance(entries, Mapping):
        entries = entries.items()
    items = [_entry_item(nodes, bytes(k), v) for k, v in entries]
    items.sort(key=lambda it: it[0])
    for (a, _), (b, _) in zip(items, items[1:]):
        if a == b:
            raise DuplicateKeyError(f"duplicate key {a!r}")
    return items


def build(entries, store: ChunkStore, config: ChunkerConfig | None = None) -> TreeRef:
    """Build a tree over ``entries`` (a mapping or (key, value) pairs)."""
    nodes = _Nodes(store, config)
    items = _sorted_items(nodes, entries)
    return _build_items(nodes, items)


def _build_items(nodes: _Nodes, items: list[Item]) -> TreeRef:
    refs = nodes.write_level(0, items)
    root, height = nodes.stack(0, refs)
    return TreeRef(root, height, len(items))


def lookup(tree: TreeRef, key: bytes, store: ChunkStore) -> bytes | None:
    nodes = _Nodes(store, None)
    cid = tree.root
    for level in range(tree.height - 1, -1, -1):
        items = nodes.load(cid, level)
        keys = [k for k, _ in items]
        i = bisect.bisect_left(keys, key)
        if i == len(items):
            return None
        if level == 0:
            return entry_value(store, items[i][1]) if keys[i] == key else None
        cid = child_id(items[i][1])
    return None


def scan(tree: TreeRef, store: ChunkStore, lo: bytes | None = None,
         hi: bytes | None = None) -> Iterator[tuple[bytes, bytes]]:
    """Yield entries with ``lo <= key < hi`` in key order; ``None`` is unbounded."""
    nodes = _Nodes(store, None)

    def walk(cid, level):
        items = nodes.load(cid, level)
        if level == 0:
            for key, enc in items:
                if lo is not None and key < lo:
                    continue
                if hi is not None and key >= hi:
                    return
                yield key, entry_value(store, enc)
            return
        prev = None
        for key, enc in items:
            if hi is not None and prev is not None and prev >= hi:
                return
            if lo is None or key >= lo:
                yield from walk(child_id(enc), level - 1)
            prev = key

    if lo is not None and hi is not None and lo >= hi:
        return
    yield from walk(tree.root, tree.height - 1)


def iter_entries(tree: TreeRef, store: ChunkStore) -> Iterator[tuple[bytes, bytes]]:
    return scan(tree, store)


def node_ids(tree: TreeRef, store: ChunkStore) -> set[NodeId]:
    """Every node id reachable from the root (value blobs excluded)."""
    nodes = _Nodes(store, None)
    seen = {tree.root}
    frontier = [tree.root]
    for level in range(tree.height - 1, 0, -1):
        nxt = []
        for cid in frontier:
            for _, enc in nodes.load(cid, level):
                c = child_id(enc)
                if c not in seen:
                    seen.add(c)
                    nxt.append(c)
        frontier = nxt
    return seen


def leaf_ids(tree: TreeRef, store: ChunkStore) -> list[NodeId]:
    refs = _level_refs(_Nodes(store, None), tree)[0]
    return [child_id(enc) for _, enc in refs]


# -- functional updates -------------------------------------------------

def _level_refs(nodes: _Nodes, tree: TreeRef) -> list[list[Item]]:
    """Reference items for every level, bottom first; the top holds the root."""
    h = tree.height
    items = nodes.load(tree.root, h - 1)
    top_key = items[-1][0] if items else b""
    levels: list[list[Item]] = [[]] * h
    levels[h - 1] = [(top_key, encode_entry(top_key, TAG_CHILD, tree.root))]
    for level in range(h - 1, 0, -1):
        levels[level - 1] = items
        if level > 1:
            items = [it for _, enc in items for it in nodes.load(child_id(enc), level - 1)]
    return levels


def _merge_items(old: list[Item], edits: Sequence[tuple[bytes, bytes | None]]):
    """Apply sorted ``(key, item-or-None)`` edits; return (items, changed, count delta)."""
    out = []
    changed = False
    delta = 0
    i = 0
    for key, enc in edits:
        while i < len(old) and old[i][0] < key:
            out.append(old[i])
            i += 1
        present = i < len(old) and old[i][0] == key
        if present:
            if enc is None:
                changed, delta = True, delta - 1
            else:
                changed = changed or enc != old[i][1]
                out.append((key, enc))
            i += 1
        elif enc is not None:
            out.append((key, enc))
            changed, delta = True, delta + 1
    out.extend(old[i:])
    return out, changed, delta


def _rewrite_level(nodes: _Nodes, level: int, old_refs: list[Item],
                   edits: list[tuple[bytes, bytes | None]]):
    """Apply ``edits`` to the level whose nodes are ``old_refs``.

    Returns the new reference list, the edits to apply one level up, and the
    change in entry count.
    """
    split_keys = [k for k, _ in old_refs]
    edit_keys = [k for k, _ in edits]
    out: list[Item] = []
    removed: dict[bytes, bytes] = {}
    added: dict[bytes, bytes] = {}
    delta = 0
    i = e = 0
    last = len(old_refs) - 1
    while e < len(edits):
        a = min(bisect.bisect_left(split_keys, edit_keys[e], lo=i), last)
        out.extend(old_refs[i:a])
        i = a
        pending: list[Item] = []
        if a > 0 and out and out[-1] == old_refs[a - 1]:
            # a forced cut depends on the size of the entry after it, so the
            # node before the edit is re-segmented as well
            prev = out.pop()
            removed[prev[0]] = prev[1]
            pending = list(nodes.load(child_id(prev[1]), level))
        while True:
            hi = len(edits) if i == last else bisect.bisect_right(edit_keys, split_keys[i], lo=e)
            node_items = nodes.load(child_id(old_refs[i][1]), level)
            merged, changed, d = _merge_items(node_items, edits[e:hi])
            e = hi
            delta += d
            if not changed and not pending:
                out.append(old_refs[i])
                i += 1
                break
            removed[old_refs[i][0]] = old_refs[i][1]
            i += 1
            pending.extend(merged)
            if not pending:
                break
            if pending and i <= last and e < len(edits) and (i == last or edit_keys[e] <= split_keys[i]):
                # the next node is edited too: segment the whole run at once
                continue
            seg = nodes.chunker(level).segment([enc for _, enc in pending])
            finished = i > last
            keep_tail = not (seg.closed or finished)
            bounds = seg.splits[:-1] if keep_tail else seg.splits
            start = 0
            for end in bounds:
                ref = nodes.write(level, pending[start:end])
                out.append(ref)
                added[ref[0]] = ref[1]
                start = end
            pending = pending[start:]
            if finished or not pending:
                break
    out.extend(old_refs[i:])

    up = []
    for key in sorted(removed.keys() | added.keys()):
        new = added.get(key)
        if new != removed.get(key):
            up.append((key, new))
    return out, up, delta


def update(tree: TreeRef, store: ChunkStore, config: ChunkerConfig | None = None,
           set: Mapping[bytes, bytes] | Iterable[tuple[bytes, bytes]] = (),
           delete: Iterable[bytes] = ()) -> TreeRef:
    """Return a new tree with ``set`` written and ``delete`` removed.

    The original tree is untouched. A key present in both ``set`` and
    ``delete`` is deleted.
    """
    nodes = _Nodes(store, config)
    if isinstance(set, Mapping):
        set = set.items()
    edits = dict((k, it) for k, it in (_entry_item(nodes, bytes(k), v) for k, v in set))
    for key in delete:
        edits[bytes(key)] = None
    return _apply(nodes, tree, sorted(edits.items()))


def _apply(nodes: _Nodes, tree: TreeRef, edits: list[tuple[bytes, bytes | None]]) -> TreeRef:
    if not edits:
        return tree
    levels = _level_refs(nodes, tree)
    count = tree.entry_count
    for level in range(tree.height):
        refs, edits, delta = _rewrite_level(nodes, level, levels[level], edits)
        if level == 0:
            count += delta
            if not refs:
                return _build_items(nodes, [])
        if not edits:
            # nothing changed from here up
            return TreeRef(tree.root, tree.height, count)
        if len(refs) == 1:
            return TreeRef(child_id(refs[0][1]), level + 1, count)
        if level + 1 == tree.height:
            root, height = nodes.stack(level, refs)
            return TreeRef(root, height, count)
    raise AssertionError("unreachable")


def insert(tree: TreeRef, key: bytes, value: bytes, store: ChunkStore,
           config: ChunkerConfig | None = None) -> TreeRef:
    return update(tree, store, config, set=[(key, value)])


def remove(tree: TreeRef, key: bytes, store: ChunkStore,
           config: ChunkerConfig | None = None) -> TreeRef:
    return update(tree, store, config, delete=[key])
