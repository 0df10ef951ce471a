"""Versions, branches and verification.

An FNode is stored as a chunk of kind FNODE; its chunk id is the version
uid. Canonical layout (little-endian, nothing outside it is hashed)::

    [u16 key_len][key][u8 type][32-byte value_root][u64 entry_count]
    [u8 height][u8 base_count][32-byte base uid]*[u16 msg_len][msg]

Branch heads live in an append-only journal, ``branches.log``, of records::

    [u16 key_len][key][u8 branch_len][branch][32-byte uid]

The last record for a (key, branch) pair is its head.
"""

from __future__ import annotations

import enum
import re
import struct
import threading
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

from .chunk_store import ChunkStore, Kind, NodeId, chunk_id
from .chunker import ChunkerConfig
from .diff_merge import MergeOutcome, merge3
from .errors import (
    BranchExistsError,
    BranchStoreError,
    ConcurrentUpdateError,
    CorruptChunkError,
    NoCommonAncestorError,
    UnknownRefError,
)
from .pos_tree import TreeRef, child_id, decode_entry, decode_node, TAG_BLOB

BRANCH_NAME = re.compile(r"[A-Za-z0-9._-]{1,64}")


class ValueType(enum.IntEnum):
    MAP = 1
    BLOB = 2


@dataclass(frozen=True)
class FNode:
    key: str
    value_type: ValueType
    value_root: NodeId
    bases: tuple[NodeId, ...] = ()
    message: str = ""
    entry_count: int = 0
    height: int = 0

    def encode(self) -> bytes:
        key = self.key.encode("utf-8")
        msg = self.message.encode("utf-8")
        if len(self.bases) > 255:
            raise ValueError("too many bases")
        return b"".join((
            struct.pack("<H", len(key)), key,
            struct.pack("<B", self.value_type), self.value_root,
            struct.pack("<QBB", self.entry_count, self.height, len(self.bases)),
            *self.bases,
            struct.pack("<H", len(msg)), msg,
        ))

    @classmethod
    def decode(cls, payload: bytes) -> "FNode":
        try:
            (klen,) = struct.unpack_from("<H", payload, 0)
            pos = 2
            key = payload[pos:pos + klen].decode("utf-8")
            pos += klen
            (vtype,) = struct.unpack_from("<B", payload, pos)
            root = NodeId(payload[pos + 1:pos + 33])
            pos += 33
            count, height, nbases = struct.unpack_from("<QBB", payload, pos)
            pos += 10
            bases = tuple(NodeId(payload[pos + 32 * i:pos + 32 * (i + 1)]) for i in range(nbases))
            pos += 32 * nbases
            (mlen,) = struct.unpack_from("<H", payload, pos)
            pos += 2
            message = payload[pos:pos + mlen].decode("utf-8")
            if pos + mlen != len(payload):
                raise ValueError("length mismatch")
            return cls(key, ValueType(vtype), root, bases, message, count, height)
        except (struct.error, ValueError, UnicodeDecodeError) as exc:
            raise CorruptChunkError(None, f"malformed fnode: {exc}") from None

    @property
    def uid(self) -> NodeId:
        return chunk_id(Kind.FNODE, self.encode())

    @property
    def tree(self) -> TreeRef:
        return TreeRef(self.value_root, self.height, self.entry_count)


def load_fnode(store: ChunkStore, uid: bytes) -> FNode:
    chunk = store.get_chunk(uid)
    if chunk.kind != Kind.FNODE:
        raise CorruptChunkError(NodeId(uid), f"expected an fnode, found {chunk.kind.name}")
    try:
        return FNode.decode(chunk.payload)
    except CorruptChunkError as exc:
        raise CorruptChunkError(NodeId(uid), exc.reason) from None


class BranchTable:
    """Branch heads per object key, optionally journaled to ``path``."""

    _REC_HEAD = struct.Struct("<H")

    def __init__(self, path=None, exists=None):
        self._lock = threading.Lock()
        self._heads: dict[str, dict[str, NodeId]] = {}
        self.path = Path(path) if path is not None else None
        self._journal = None
        if self.path is not None:
            self._replay(exists)
            self._journal = open(self.path, "ab")

    def _replay(self, exists):
        self.path.touch(exist_ok=True)
        raw = self.path.read_bytes()
        pos = good = 0
        while True:
            try:
                (klen,) = self._REC_HEAD.unpack_from(raw, pos)
                key = raw[pos + 2:pos + 2 + klen].decode("utf-8")
                p = pos + 2 + klen
                blen = raw[p]
                branch = raw[p + 1:p + 1 + blen].decode("ascii")
                p += 1 + blen
                uid = raw[p:p + 32]
                if len(uid) != 32:
                    break
                pos = p + 32
            except (struct.error, IndexError, UnicodeDecodeError):
                break
            good = pos
            # a head whose chunk never made it to disk is ignored
            if exists is None or exists(uid):
                self._heads.setdefault(key, {})[branch] = NodeId(uid)
        if good != len(raw):
            with open(self.path, "r+b") as f:
                f.truncate(good)

    def close(self):
        if self._journal is not None and not self._journal.closed:
            self._journal.close()

    def head(self, key: str, branch: str) -> NodeId | None:
        return self._heads.get(key, {}).get(branch)

    def branches(self, key: str) -> dict[str, NodeId]:
        return dict(sorted(self._heads.get(key, {}).items()))

    def keys(self) -> list[str]:
        return sorted(self._heads)

    def set(self, key: str, branch: str, uid: NodeId, expected: NodeId | None = None,
            create: bool = False):
        """Compare-and-swap the head of ``branch`` from ``expected`` to ``uid``."""
        if not BRANCH_NAME.fullmatch(branch):
            raise ValueError(f"invalid branch name {branch!r}")
        with self._lock:
            current = self.head(key, branch)
            if create:
                if current is not None:
                    raise BranchExistsError(f"branch {branch!r} already exists on {key!r}")
            elif current != expected:
                raise ConcurrentUpdateError(
                    f"head of {key}/{branch} moved: expected {expected}, found {current}")
            if self._journal is not None:
                kb = key.encode("utf-8")
                bb = branch.encode("ascii")
                self._journal.write(self._REC_HEAD.pack(len(kb)) + kb + bytes((len(bb),)) + bb + uid)
                self._journal.flush()
            self._heads.setdefault(key, {})[branch] = NodeId(uid)


def commit(key: str, branch: str, value_root: NodeId, value_type: ValueType, message: str,
           store: ChunkStore, branches: BranchTable, *, entry_count: int = 0, height: int = 0,
           create: bool = False, extra_bases=(), expected: NodeId | None = ...) -> NodeId:
    """Write an FNode on top of the current head of ``branch`` and advance it.

    ``create`` starts a new branch with no history. ``expected`` pins the head
    the caller read; it defaults to whatever the head is now.
    """
    prev = branches.head(key, branch)
    if prev is None and not create:
        raise UnknownRefError(f"no branch {branch!r} on {key!r}")
    if prev is not None and create:
        raise BranchExistsError(f"branch {branch!r} already exists on {key!r}")
    if expected is ...:
        expected = prev
    bases = ((prev,) if prev is not None else ()) + tuple(extra_bases)
    node = FNode(key, ValueType(value_type), NodeId(value_root), bases, message, entry_count, height)
    payload = node.encode()
    uid = chunk_id(Kind.FNODE, payload)
    if uid in bases:
        raise BranchStoreError("an fnode cannot list itself as a base")
    store.put(Kind.FNODE, payload)
    store.flush()
    branches.set(key, branch, uid, expected=expected, create=prev is None)
    return uid


def head(key: str, branch: str, branches: BranchTable) -> NodeId:
    uid = branches.head(key, branch)
    if uid is None:
        raise UnknownRefError(f"no branch {branch!r} on {key!r}")
    return uid


def latest(key: str, branches: BranchTable) -> dict[str, NodeId]:
    """Head uid of every branch of ``key``, by branch name."""
    heads = branches.branches(key)
    if not heads:
        raise UnknownRefError(f"unknown key {key!r}")
    return heads


def log(key: str, branch: str, store: ChunkStore, branches: BranchTable,
        limit: int | None = None, start: NodeId | None = None) -> list[tuple[NodeId, FNode]]:
    """First-parent history, newest first."""
    uid = start if start is not None else head(key, branch, branches)
    out = []
    while uid is not None and (limit is None or len(out) < limit):
        node = load_fnode(store, uid)
        out.append((uid, node))
        uid = node.bases[0] if node.bases else None
    return out


def branch(key: str, new_branch: str, source: NodeId, store: ChunkStore,
           branches: BranchTable) -> NodeId:
    """Point ``new_branch`` at ``source``. Writes no chunks."""
    node = load_fnode(store, source)
    if node.key != key:
        raise UnknownRefError(f"{source} is a version of {node.key!r}, not {key!r}")
    branches.set(key, new_branch, NodeId(source), create=True)
    return NodeId(source)


def _depths(store: ChunkStore, start: NodeId) -> dict[NodeId, int]:
    depth = {start: 0}
    queue = deque([start])
    while queue:
        uid = queue.popleft()
        for base in load_fnode(store, uid).bases:
            if base not in depth:
                depth[base] = depth[uid] + 1
                queue.append(base)
    return depth


def common_ancestor(store: ChunkStore, a: NodeId, b: NodeId) -> NodeId:
    """Nearest common ancestor by summed BFS depth, ties to the smallest uid."""
    da, db = _depths(store, a), _depths(store, b)
    common = da.keys() & db.keys()
    if not common:
        raise NoCommonAncestorError(f"{a} and {b} share no history")
    return min(common, key=lambda u: (da[u] + db[u], bytes(u)))


@dataclass
class MergeResult:
    status: str  # "up-to-date", "fast-forward", "merged" or "conflict"
    uid: NodeId | None = None
    conflicts: list[bytes] = field(default_factory=list)


def merge_branches(key: str, dst_branch: str, src_branch: str, store: ChunkStore,
                   branches: BranchTable, config: ChunkerConfig | None = None,
                   message: str | None = None) -> MergeResult:
    dst = head(key, dst_branch, branches)
    src = head(key, src_branch, branches)
    base = common_ancestor(store, dst, src)
    if base == src:
        return MergeResult("up-to-date", dst)
    if base == dst:
        branches.set(key, dst_branch, src, expected=dst)
        return MergeResult("fast-forward", src)

    nd, ns, nb = (load_fnode(store, u) for u in (dst, src, base))
    if not nd.value_type == ns.value_type == nb.value_type:
        raise BranchStoreError("cannot merge versions of different value types")
    if nd.value_type == ValueType.MAP:
        outcome = merge3(nb.tree, nd.tree, ns.tree, store, config)
    else:
        outcome = _merge_blob(nb.value_root, nd.value_root, ns.value_root, key)
    if not outcome.ok:
        return MergeResult("conflict", None, outcome.conflicts)
    merged = outcome.merged
    uid = commit(key, dst_branch, merged.root, nd.value_type,
                 message or f"merge {src_branch} into {dst_branch}", store, branches,
                 entry_count=merged.entry_count, height=merged.height if nd.value_type == ValueType.MAP else 0,
                 extra_bases=(src,), expected=dst)
    return MergeResult("merged", uid)


def _merge_blob(base, a, b, key) -> MergeOutcome:
    if a == b or b == base:
        return MergeOutcome(TreeRef(a, 0))
    if a == base:
        return MergeOutcome(TreeRef(b, 0))
    return MergeOutcome(None, [key.encode("utf-8")])


# -- verification ---------------------------------------------------------

@dataclass
class VerificationReport:
    ok: bool
    bad_chunk: NodeId | None = None
    reason: str = ""
    chunks_checked: int = 0
    versions_checked: int = 0


class _Failure(Exception):
    def __init__(self, cid, reason):
        self.cid = NodeId(cid)
        self.reason = reason


def verify(uid: NodeId, store: ChunkStore, depth_limit: int | None = None) -> VerificationReport:
    """Check a version, its value and its history against ``uid``.

    Nothing the store returns is trusted: every chunk is re-hashed against
    the id it was requested by, and any exception is turned into a failing
    report naming the chunk being checked.
    """
    verified: set[bytes] = set()
    report = VerificationReport(ok=True)

    def fetch(cid, kinds):
        try:
            raw = store.read_raw(cid)
        except Exception as exc:  # store may be hostile
            raise _Failure(cid, f"store error: {exc!r}")
        if raw is None:
            raise _Failure(cid, "missing chunk")
        try:
            kind, payload = raw
            if chunk_id(kind, payload) != cid:
                raise _Failure(cid, "digest mismatch")
        except _Failure:
            raise
        except Exception as exc:
            raise _Failure(cid, f"malformed store response: {exc!r}")
        if kind not in kinds:
            raise _Failure(cid, f"unexpected chunk kind {kind}")
        report.chunks_checked += 1
        return kind, payload

    # node id -> (entry count, min key, max key) of an already checked subtree
    summaries: dict[bytes, tuple[int, bytes | None, bytes | None]] = {}

    def check_node(cid, level):
        if cid in summaries:
            return summaries[cid]
        kind, payload = fetch(cid, (Kind.LEAF, Kind.INDEX))
        try:
            node_level, items = decode_node(payload, cid)
        except CorruptChunkError as exc:
            raise _Failure(cid, exc.reason)
        if node_level != level or (kind == Kind.LEAF) != (level == 0):
            raise _Failure(cid, f"node at level {node_level}, expected {level}")
        keys = [k for k, _ in items]
        if any(x >= y for x, y in zip(keys, keys[1:])):
            raise _Failure(cid, "keys out of order")
        if level == 0:
            for _, enc in items:
                _, tag, value = decode_entry(enc)
                if tag == TAG_BLOB and value not in verified:
                    fetch(value, (Kind.BLOB,))
                    verified.add(value)
            summary = (len(items), keys[0] if keys else None, keys[-1] if keys else None)
        else:
            if not items:
                raise _Failure(cid, "empty index node")
            count = 0
            low = None
            prev = None
            for key, enc in items:
                n, lo, hi = check_node(child_id(enc), level - 1)
                if hi != key or (prev is not None and lo is not None and lo <= prev):
                    raise _Failure(cid, "split key disagrees with child subtree")
                if low is None:
                    low = lo
                count += n
                prev = key
            summary = (count, low, keys[-1])
        summaries[cid] = summary
        return summary

    def check_version(vid):
        _, payload = fetch(vid, (Kind.FNODE,))
        try:
            node = FNode.decode(payload)
        except CorruptChunkError as exc:
            raise _Failure(vid, exc.reason)
        if node.value_type == ValueType.MAP:
            if node.height < 1:
                raise _Failure(vid, "map version with zero height")
            count = check_node(node.value_root, node.height - 1)[0]
            if count != node.entry_count:
                raise _Failure(vid, f"entry count {node.entry_count} but tree holds {count}")
        elif node.value_root not in verified:
            fetch(node.value_root, (Kind.BLOB,))
            verified.add(node.value_root)
        report.versions_checked += 1
        return node

    try:
        depth = {NodeId(uid): 0}
        queue = deque([NodeId(uid)])
        while queue:
            vid = queue.popleft()
            node = check_version(vid)
            if depth_limit is not None and depth[vid] >= depth_limit:
                continue
            for base in node.bases:
                if base not in depth:
                    depth[base] = depth[vid] + 1
                    queue.append(base)
    except _Failure as fail:
        report.ok = False
        report.bad_chunk = fail.cid
        report.reason = fail.reason
    except Exception as exc:  # pragma: no cover - defensive
        report.ok = False
        report.reason = f"unexpected error: {exc!r}"
    return report
