"""Library facade tying the chunk store, trees and versions together.

A repository on disk is one directory::

    config        key = value lines, written once by ``init``
    chunks.log    chunk log
    chunks.idx    chunk index
    branches.log  branch head journal
    lock          held by the CLI while it runs
"""

from __future__ import annotations

import csv
import hashlib
import io
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

from .chunk_store import ChunkStore, FileStore, Kind, MemoryStore, NodeId, StoreStats
from .chunker import ChunkerConfig
from .diff_merge import DiffResult, DiffStats, diff
from .errors import (
    BranchStoreError,
    ConfigMismatchError,
    CorruptChunkError,
    DuplicateKeyError,
    UnknownRefError,
    VerificationError,
)
from . import pos_tree, version
from .version import BranchTable, FNode, MergeResult, ValueType, VerificationReport

DEFAULT_BRANCH = "master"
CONFIG_NAME = "config"
BRANCHES_NAME = "branches.log"

_REF_ANCESTOR = re.compile(r"^(.+)@~(\d+)$")


@dataclass(frozen=True)
class EngineConfig:
    store_path: Path | None = None
    chunker: ChunkerConfig = field(default_factory=ChunkerConfig)

    def fingerprint(self) -> str:
        c = self.chunker
        text = f"k={c.k};q={c.q};max_node_bytes={c.max_node_bytes};seed={c.seed}"
        return hashlib.sha256(text.encode()).hexdigest()

    def render(self) -> str:
        c = self.chunker
        return (
            f"chunker.k = {c.k}\n"
            f"chunker.q = {c.q}\n"
            f"chunker.max_node_bytes = {c.max_node_bytes}\n"
            f"chunker.seed = {c.seed}\n"
            f"fingerprint = {self.fingerprint()}\n"
        )

    @classmethod
    def parse(cls, text: str, store_path=None) -> "EngineConfig":
        values = {}
        for line in text.splitlines():
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            name, _, value = line.partition("=")
            values[name.strip()] = value.strip()
        try:
            chunker = ChunkerConfig(
                k=int(values["chunker.k"]),
                q=int(values["chunker.q"]),
                max_node_bytes=int(values["chunker.max_node_bytes"]),
                seed=int(values["chunker.seed"]),
            )
        except KeyError as exc:
            raise ConfigMismatchError(f"config is missing {exc.args[0]}") from None
        except ValueError as exc:
            raise ConfigMismatchError(f"invalid config: {exc}") from None
        config = cls(Path(store_path) if store_path else None, chunker)
        stored = values.get("fingerprint")
        if stored is not None and stored != config.fingerprint():
            raise ConfigMismatchError("config file was edited after the store was created")
        return config


@dataclass
class LoadReport:
    rows: int
    columns: list[str]
    new_payload_bytes: int
    new_chunks: int
    dedup_hits: int


class Repository:
    """Versioned key -> value store. Values are ordered maps or blobs."""

    def __init__(self, store: ChunkStore, branches: BranchTable, config: EngineConfig):
        self.store = store
        self.branches = branches
        self.config = config

    # -- lifecycle -----------------------------------------------------

    @classmethod
    def memory(cls, chunker: ChunkerConfig | None = None) -> "Repository":
        return cls(MemoryStore(), BranchTable(), EngineConfig(None, chunker or ChunkerConfig()))

    @classmethod
    def init(cls, path, chunker: ChunkerConfig | None = None) -> "Repository":
        path = Path(path)
        config = EngineConfig(path, chunker or ChunkerConfig())
        cfg = path / CONFIG_NAME
        if cfg.exists():
            existing = EngineConfig.parse(cfg.read_text(), path)
            if existing.chunker != config.chunker:
                raise ConfigMismatchError(
                    f"store at {path} was created with {existing.chunker}; refusing {config.chunker}")
        else:
            path.mkdir(parents=True, exist_ok=True)
            tmp = cfg.with_suffix(".tmp")
            tmp.write_text(config.render())
            tmp.replace(cfg)
        return cls.open(path)

    @classmethod
    def open(cls, path, chunker: ChunkerConfig | None = None) -> "Repository":
        path = Path(path)
        cfg = path / CONFIG_NAME
        if not cfg.exists():
            raise BranchStoreError(f"no store at {path} (run init first)")
        config = EngineConfig.parse(cfg.read_text(), path)
        if chunker is not None and chunker != config.chunker:
            raise ConfigMismatchError(
                f"store at {path} uses {config.chunker}; refusing {chunker}")
        store = FileStore(path)
        branches = BranchTable(path / BRANCHES_NAME, exists=store.__contains__)
        return cls(store, branches, config)

    def close(self):
        self.store.close()
        self.branches.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    @property
    def chunker(self) -> ChunkerConfig:
        return self.config.chunker

    # -- refs ----------------------------------------------------------

    def resolve(self, key: str, ref: str | bytes | None = None) -> NodeId:
        """Turn ``branch``, ``branch@~n`` or a Base32 uid into a uid."""
        if ref is None:
            ref = DEFAULT_BRANCH
        if isinstance(ref, bytes):
            uid = NodeId(ref)
        else:
            uid = self.branches.head(key, ref)
            if uid is None:
                m = _REF_ANCESTOR.match(ref)
                if m and self.branches.head(key, m.group(1)) is not None:
                    steps = int(m.group(2))
                    history = version.log(key, m.group(1), self.store, self.branches, limit=steps + 1)
                    if len(history) <= steps:
                        raise UnknownRefError(f"{ref}: branch has only {len(history)} versions")
                    return history[steps][0]
                try:
                    uid = NodeId.parse(ref)
                except ValueError:
                    raise UnknownRefError(f"unknown branch or version {ref!r} for {key!r}") from None
        if uid not in self.store:
            raise UnknownRefError(f"unknown version {uid}")
        node = version.load_fnode(self.store, uid)
        if node.key != key:
            raise UnknownRefError(f"{uid} is a version of {node.key!r}, not {key!r}")
        return uid

    def fnode(self, key: str, ref=None) -> FNode:
        return version.load_fnode(self.store, self.resolve(key, ref))

    def tree(self, key: str, ref=None) -> pos_tree.TreeRef:
        node = self.fnode(key, ref)
        if node.value_type != ValueType.MAP:
            raise BranchStoreError(f"{key!r} holds a blob, not a map")
        return node.tree

    # -- data ------------------------------------------------------------

    def _commit_tree(self, key, branch, tree, message, expected=...):
        return version.commit(
            key, branch, tree.root, ValueType.MAP, message, self.store, self.branches,
            entry_count=tree.entry_count, height=tree.height,
            create=self.branches.head(key, branch) is None, expected=expected)

    def _check_branch(self, key, branch):
        if self.branches.head(key, branch) is None and self.branches.branches(key):
            raise UnknownRefError(
                f"{key!r} has no branch {branch!r}; create it with branch() first")

    def put(self, key: str, value, branch: str = DEFAULT_BRANCH, message: str | None = None) -> NodeId:
        """Commit ``value`` (bytes for a blob, a mapping for a map) as the new head."""
        self._check_branch(key, branch)
        message = message if message is not None else f"put {key}"
        if isinstance(value, (bytes, bytearray, memoryview)):
            blob = self.store.put(Kind.BLOB, bytes(value))
            return version.commit(key, branch, blob, ValueType.BLOB, message, self.store,
                                  self.branches, create=self.branches.head(key, branch) is None)
        tree = pos_tree.build(value, self.store, self.chunker)
        return self._commit_tree(key, branch, tree, message)

    def update(self, key: str, set: Mapping[bytes, bytes] | Iterable = (), delete: Iterable[bytes] = (),
               branch: str = DEFAULT_BRANCH, message: str | None = None) -> NodeId:
        """Apply point edits to the map at the head of ``branch`` and commit."""
        self._check_branch(key, branch)
        prev = self.branches.head(key, branch)
        if prev is None:
            # a new key: deletions are no-ops and the edits are the whole map
            dropped = frozenset(delete)
            pairs = set.items() if isinstance(set, Mapping) else set
            tree = pos_tree.build({k: v for k, v in pairs if k not in dropped}, self.store, self.chunker)
        else:
            node = version.load_fnode(self.store, prev)
            if node.value_type != ValueType.MAP:
                raise BranchStoreError(f"{key!r} holds a blob, not a map")
            tree = pos_tree.update(node.tree, self.store, self.chunker, set=set, delete=delete)
        return self._commit_tree(key, branch, tree, message or f"update {key}", expected=prev)

    def get(self, key: str, ref=None, verify: bool = False):
        """Materialize a value: ``dict`` for maps, ``bytes`` for blobs."""
        if verify:
            report = self.verify(key, ref)
            if not report.ok:
                raise VerificationError(report)
        uid = self.resolve(key, ref)
        node = version.load_fnode(self.store, uid)
        if node.value_type == ValueType.BLOB:
            return self.store.get_chunk(node.value_root).payload
        return dict(pos_tree.iter_entries(node.tree, self.store))

    def lookup(self, key: str, entry_key: bytes, ref=None) -> bytes | None:
        return pos_tree.lookup(self.tree(key, ref), entry_key, self.store)

    def select(self, key: str, ref=None, lo: bytes | None = None, hi: bytes | None = None):
        return list(pos_tree.scan(self.tree(key, ref), self.store, lo, hi))

    def load_csv(self, path, key: str, key_column: str, branch: str = DEFAULT_BRANCH,
                 message: str | None = None) -> tuple[NodeId, LoadReport]:
        """Load a CSV file as a map from ``key_column`` to the raw row bytes."""
        header, rows = read_csv_rows(Path(path).read_bytes(), key_column)
        before = self.store.stats()
        self._check_branch(key, branch)
        prev = self.branches.head(key, branch)
        if prev is None:
            tree = pos_tree.build(rows, self.store, self.chunker)
        else:
            # replace the previous version's rows by edits, reusing its nodes
            old = self.tree(key, prev)
            current = dict(rows)
            stale = [k for k, _ in pos_tree.iter_entries(old, self.store) if k not in current]
            tree = pos_tree.update(old, self.store, self.chunker, set=current, delete=stale)
        uid = self._commit_tree(key, branch, tree, message or f"load {Path(path).name}", expected=prev)
        after = self.store.stats()
        report = LoadReport(
            rows=len(rows), columns=header,
            new_payload_bytes=after.total_payload_bytes - before.total_payload_bytes,
            new_chunks=after.chunk_count - before.chunk_count,
            dedup_hits=after.dedup_hits - before.dedup_hits,
        )
        return uid, report

    # -- versions --------------------------------------------------------

    def diff(self, key: str, ref_a, ref_b, stats: DiffStats | None = None) -> DiffResult:
        a, b = self.fnode(key, ref_a), self.fnode(key, ref_b)
        if a.value_type == b.value_type == ValueType.MAP:
            return diff(a.tree, b.tree, self.store, stats)
        result = DiffResult()
        if a.value_root != b.value_root:
            va = self.get(key, a.uid)
            vb = self.get(key, b.uid)
            result.modified.append((key.encode(), _as_bytes(va), _as_bytes(vb)))
        return result

    def branch(self, key: str, new_branch: str, source=None) -> NodeId:
        return version.branch(key, new_branch, self.resolve(key, source), self.store, self.branches)

    def merge(self, key: str, dst_branch: str, src_branch: str, message: str | None = None) -> MergeResult:
        return version.merge_branches(key, dst_branch, src_branch, self.store, self.branches,
                                      self.chunker, message)

    def head(self, key: str, branch: str = DEFAULT_BRANCH) -> NodeId:
        return version.head(key, branch, self.branches)

    def latest(self, key: str) -> dict[str, NodeId]:
        return version.latest(key, self.branches)

    def log(self, key: str, ref=None, limit: int | None = None):
        return version.log(key, None, self.store, self.branches, limit, start=self.resolve(key, ref))

    def verify(self, key: str, ref=None, depth_limit: int | None = None) -> VerificationReport:
        try:
            uid = self.resolve(key, ref)
        except CorruptChunkError as exc:
            # resolving reads version nodes, which may be the damaged ones
            return VerificationReport(ok=False, bad_chunk=exc.chunk_id, reason=exc.reason)
        return version.verify(uid, self.store, depth_limit)

    def keys(self) -> list[str]:
        return self.branches.keys()

    def stat(self) -> StoreStats:
        return self.store.stats()


def _as_bytes(value) -> bytes:
    if isinstance(value, bytes):
        return value
    return b"".join(k + b"\t" + v + b"\n" for k, v in sorted(value.items()))


def read_csv_rows(data: bytes, key_column: str) -> tuple[list[str], list[tuple[bytes, bytes]]]:
    """Parse RFC 4180 CSV, keeping each record's original bytes.

    Returns the header and ``(primary key, raw record)`` pairs in file order.
    Raw records exclude their final line terminator.
    """
    lines = data.splitlines(keepends=True)
    consumed: list[bytes] = []

    def feed():
        for raw in lines:
            consumed.append(raw)
            yield raw.decode("utf-8")

    reader = csv.reader(feed(), strict=True)
    try:
        header = next(reader)
    except StopIteration:
        raise BranchStoreError("empty CSV file") from None
    except csv.Error as exc:
        raise BranchStoreError(f"malformed CSV header: {exc}") from None
    if key_column not in header:
        raise BranchStoreError(f"key column {key_column!r} not in header {header}")
    col = header.index(key_column)
    consumed.clear()

    rows = []
    seen: dict[bytes, int] = {}
    dupes = []
    line_no = 2
    while True:
        try:
            fields = next(reader)
        except StopIteration:
            break
        except csv.Error as exc:
            raise BranchStoreError(f"malformed CSV near line {line_no}: {exc}") from None
        raw = b"".join(consumed)
        start = line_no
        line_no += len(consumed)
        consumed.clear()
        if not fields:
            continue
        if col >= len(fields):
            raise BranchStoreError(f"line {start}: row has no {key_column!r} field")
        pk = fields[col].encode("utf-8")
        if not pk:
            raise BranchStoreError(f"line {start}: empty primary key")
        if pk in seen:
            dupes.append(f"{pk.decode()!r} on lines {seen[pk]} and {start}")
            continue
        seen[pk] = start
        rows.append((pk, _strip_terminator(raw)))
    if dupes:
        raise DuplicateKeyError("duplicate primary keys: " + "; ".join(dupes))
    return header, rows


def _strip_terminator(raw: bytes) -> bytes:
    if raw.endswith(b"\r\n"):
        return raw[:-2]
    if raw.endswith((b"\n", b"\r")):
        return raw[:-1]
    return raw
