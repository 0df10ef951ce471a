"""Content-addressed chunk storage.

A chunk id is ``SHA-256(kind_byte || payload)``. The kind byte keeps a raw
blob from ever sharing an id with a tree node of identical bytes.

File backend layout inside a store directory::

    chunks.log   records  [u32 LE payload length][u8 kind][payload]
    chunks.idx   records  [32-byte digest][u64 LE offset of the log record]

The log is the source of truth. The index is rebuilt from a log scan when it
is missing, and any log records past the last indexed one are re-indexed on
open. A torn record at the tail of the log is truncated away.
"""

from __future__ import annotations

import base64
import enum
import hashlib
import os
import struct
import threading
from dataclasses import dataclass
from pathlib import Path

from .errors import (
    ChunkNotFoundError,
    ChunkTooLargeError,
    CorruptChunkError,
    StoreError,
)

DEFAULT_MAX_CHUNK_BYTES = 16 << 20

_LOG_HEADER = struct.Struct("<IB")
_IDX_RECORD = struct.Struct("<32sQ")
_IDX_BATCH = 4096


class Kind(enum.IntEnum):
    LEAF = 1
    INDEX = 2
    FNODE = 3
    BLOB = 4


class NodeId(bytes):
    """32-byte SHA-256 digest; renders as unpadded RFC 4648 Base32."""

    __slots__ = ()

    def __new__(cls, digest: bytes):
        if len(digest) != 32:
            raise ValueError(f"node id must be 32 bytes, got {len(digest)}")
        return super().__new__(cls, digest)

    @classmethod
    def parse(cls, text: str) -> "NodeId":
        text = text.strip().upper().rstrip("=")
        if len(text) != 52:
            raise ValueError(f"not a Base32 node id: {text!r}")
        try:
            return cls(base64.b32decode(text + "=" * 4))
        except (ValueError, base64.binascii.Error) as exc:
            raise ValueError(f"not a Base32 node id: {text!r}") from exc

    @property
    def b32(self) -> str:
        return base64.b32encode(self).decode("ascii").rstrip("=")

    def __str__(self):
        return self.b32

    def __repr__(self):
        return f"NodeId({self.b32!r})"


def chunk_id(kind: int, payload: bytes) -> NodeId:
    h = hashlib.sha256(bytes((kind,)))
    h.update(payload)
    return NodeId(h.digest())


@dataclass(frozen=True)
class Chunk:
    kind: Kind
    payload: bytes

    @property
    def id(self) -> NodeId:
        return chunk_id(self.kind, self.payload)


@dataclass(frozen=True)
class StoreStats:
    chunk_count: int = 0
    total_payload_bytes: int = 0
    put_requests: int = 0
    dedup_hits: int = 0

    @property
    def dedup_ratio(self) -> float:
        return self.dedup_hits / self.put_requests if self.put_requests else 0.0


class ChunkStore:
    """Shared put/get logic; backends supply ``_write``, ``_read`` and ``_has``.

    ``put_requests`` and ``dedup_hits`` count traffic since the store was
    opened; a reopened store starts them at ``chunk_count`` and 0.
    """

    def __init__(self, max_chunk_bytes: int = DEFAULT_MAX_CHUNK_BYTES):
        self.max_chunk_bytes = max_chunk_bytes
        self._lock = threading.Lock()
        self._chunk_count = 0
        self._payload_bytes = 0
        self._puts = 0
        self._hits = 0

    def put_chunk(self, chunk: Chunk) -> NodeId:
        return self.put(chunk.kind, chunk.payload)

    def put(self, kind: int, payload: bytes) -> NodeId:
        if len(payload) > self.max_chunk_bytes:
            raise ChunkTooLargeError(
                f"chunk of {len(payload)} bytes exceeds {self.max_chunk_bytes}")
        cid = chunk_id(kind, payload)
        with self._lock:
            self._puts += 1
            if self._has(cid):
                self._hits += 1
                return cid
            self._write(cid, int(kind), bytes(payload))
            self._chunk_count += 1
            self._payload_bytes += len(payload)
        return cid

    def get_chunk(self, cid: bytes) -> Chunk:
        raw = self.read_raw(cid)
        if raw is None:
            raise ChunkNotFoundError(NodeId(cid))
        kind, payload = raw
        if chunk_id(kind, payload) != cid:
            raise CorruptChunkError(NodeId(cid))
        try:
            kind = Kind(kind)
        except ValueError:
            raise CorruptChunkError(NodeId(cid), f"unknown kind byte {kind}") from None
        return Chunk(kind, payload)

    def read_raw(self, cid: bytes) -> tuple[int, bytes] | None:
        """Fetch ``(kind, payload)`` without verifying the digest."""
        return self._read(cid)

    def __contains__(self, cid) -> bool:
        return self._has(cid)

    def stats(self) -> StoreStats:
        with self._lock:
            return StoreStats(self._chunk_count, self._payload_bytes, self._puts, self._hits)

    def flush(self):
        pass

    def close(self):
        pass

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def _has(self, cid) -> bool:
        raise NotImplementedError

    def _read(self, cid):
        raise NotImplementedError

    def _write(self, cid, kind, payload):
        raise NotImplementedError

    def ids(self):
        raise NotImplementedError


class MemoryStore(ChunkStore):
    def __init__(self, max_chunk_bytes: int = DEFAULT_MAX_CHUNK_BYTES):
        super().__init__(max_chunk_bytes)
        self.chunks: dict[bytes, tuple[int, bytes]] = {}

    def _has(self, cid):
        return cid in self.chunks

    def _read(self, cid):
        return self.chunks.get(cid)

    def _write(self, cid, kind, payload):
        self.chunks[cid] = (kind, payload)

    def ids(self):
        return [NodeId(c) for c in self.chunks]


class FileStore(ChunkStore):
    """Append-only log backend. Use as a context manager or call ``close``."""

    LOG_NAME = "chunks.log"
    IDX_NAME = "chunks.idx"

    def __init__(self, path, max_chunk_bytes: int = DEFAULT_MAX_CHUNK_BYTES):
        super().__init__(max_chunk_bytes)
        self.path = Path(path)
        self.path.mkdir(parents=True, exist_ok=True)
        self.log_path = self.path / self.LOG_NAME
        self.idx_path = self.path / self.IDX_NAME
        self._offsets: dict[bytes, int] = {}
        self._idx_pending: list[bytes] = []
        try:
            self._recover()
            self._log = open(self.log_path, "ab")
            self._idx = open(self.idx_path, "ab")
            self._reader = open(self.log_path, "rb")
        except OSError as exc:
            raise StoreError(f"cannot open store at {self.path}: {exc}") from exc
        self._log_end = self._log.tell()
        self._flushed = self._log_end

    def _recover(self):
        """Rebuild in-memory state, repairing only what a crash can leave.

        Index records are written after the log bytes they point to have
        been flushed, so a killed writer leaves at worst (a) index entries
        for records that never reached the log, (b) one partially written
        record at the end of the log, or (c) complete but unindexed records
        followed by a partial one. Anything else is damage: it is left in
        place so reads and verification report it.
        """
        self.log_path.touch(exist_ok=True)
        log_size = self.log_path.stat().st_size
        entries: list[tuple[bytes, int]] = []
        if self.idx_path.exists():
            raw = self.idx_path.read_bytes()
            usable = len(raw) - len(raw) % _IDX_RECORD.size
            entries = [_IDX_RECORD.unpack_from(raw, pos) for pos in range(0, usable, _IDX_RECORD.size)]
        else:
            raw = b""
            self.idx_path.touch()

        with open(self.log_path, "rb") as log:
            fd = log.fileno()

            def record(offset):
                # (kind, payload, end) of the record at offset; end may overrun
                header = os.pread(fd, _LOG_HEADER.size, offset)
                if len(header) < _LOG_HEADER.size:
                    return None, b"", log_size + 1
                length, kind = _LOG_HEADER.unpack(header)
                end = offset + _LOG_HEADER.size + length
                if end > log_size:
                    return kind, b"", end
                return kind, os.pread(fd, length, offset + _LOG_HEADER.size), end

            def intact(digest, offset, end_at=None):
                kind, payload, end = record(offset)
                return (end <= log_size and (end_at is None or end == end_at)
                        and chunk_id(kind, payload) == digest)

            # (a) entries whose record never reached the log
            while entries and entries[-1][1] >= log_size:
                entries.pop()
            truncate_at = None
            # (b) a torn final record, preceded by an intact one ending where it starts
            if entries:
                digest, offset = entries[-1]
                if record(offset)[2] > log_size:
                    earlier = [e for e in entries[:-1] if e[1] < offset]
                    prev = max(earlier, key=lambda e: e[1]) if earlier else None
                    if (offset == 0 and prev is None) or (prev and intact(*prev, end_at=offset)):
                        entries.pop()
                        truncate_at = offset

            for digest, offset in entries:
                self._offsets[digest] = offset
                end = record(offset)[2]
                if end <= log_size:
                    self._payload_bytes += end - offset - _LOG_HEADER.size

            # (c) complete records after the last indexed one
            tail_start = None
            if truncate_at is None:
                if not entries:
                    tail_start = 0
                else:
                    last = max(entries, key=lambda e: e[1])
                    if intact(*last):
                        tail_start = record(last[1])[2]
            recovered = []
            if tail_start is not None:
                log.seek(tail_start)
                tail = log.read()
                pos = 0
                while pos + _LOG_HEADER.size <= len(tail):
                    length, kind = _LOG_HEADER.unpack_from(tail, pos)
                    body = pos + _LOG_HEADER.size
                    if body + length > len(tail):
                        break
                    cid = chunk_id(kind, tail[body:body + length])
                    if cid not in self._offsets:
                        recovered.append((cid, tail_start + pos))
                        self._offsets[cid] = tail_start + pos
                        self._payload_bytes += length
                    pos = body + length
                if tail_start + pos < log_size:
                    truncate_at = tail_start + pos

        if truncate_at is not None:
            with open(self.log_path, "r+b") as f:
                f.truncate(truncate_at)
        rebuilt = b"".join(_IDX_RECORD.pack(d, o) for d, o in entries + recovered)
        if rebuilt != raw:
            tmp = self.idx_path.with_suffix(".tmp")
            tmp.write_bytes(rebuilt)
            os.replace(tmp, self.idx_path)

        self._chunk_count = len(self._offsets)
        self._puts = self._chunk_count

    def _has(self, cid):
        return cid in self._offsets

    def _write(self, cid, kind, payload):
        offset = self._log_end
        try:
            self._log.write(_LOG_HEADER.pack(len(payload), kind) + payload)
        except OSError as exc:
            raise StoreError(f"write failed at {self.log_path} offset {offset}: {exc}") from exc
        self._log_end += _LOG_HEADER.size + len(payload)
        self._offsets[cid] = offset
        # index records wait until the log bytes they point to are flushed
        self._idx_pending.append(_IDX_RECORD.pack(cid, offset))
        if len(self._idx_pending) >= _IDX_BATCH:
            self._flush_locked()

    def _read(self, cid):
        offset = self._offsets.get(cid)
        if offset is None:
            return None
        if offset >= self._flushed:
            self.flush()
        try:
            header = os.pread(self._reader.fileno(), _LOG_HEADER.size, offset)
            if len(header) < _LOG_HEADER.size:
                raise CorruptChunkError(NodeId(cid), f"truncated record at offset {offset}")
            length, kind = _LOG_HEADER.unpack(header)
            if offset + _LOG_HEADER.size + length > self._log_end:
                raise CorruptChunkError(NodeId(cid), f"record at offset {offset} overruns the log")
            payload = os.pread(self._reader.fileno(), length, offset + _LOG_HEADER.size)
        except OSError as exc:
            raise StoreError(f"read failed at {self.log_path} offset {offset}: {exc}") from exc
        return kind, payload

    def ids(self):
        return [NodeId(c) for c in self._offsets]

    def flush(self):
        with self._lock:
            self._flush_locked()

    def _flush_locked(self):
        if self._log.closed:
            return
        self._log.flush()
        if self._idx_pending:
            self._idx.write(b"".join(self._idx_pending))
            self._idx_pending.clear()
        self._idx.flush()
        self._flushed = self._log_end

    def sync(self):
        self.flush()
        os.fsync(self._log.fileno())
        os.fsync(self._idx.fileno())

    def close(self):
        if not self._log.closed:
            self.flush()
            self._log.close()
            self._idx.close()
            self._reader.close()
