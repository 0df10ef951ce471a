"""Content-defined boundary detection with a cyclic polynomial rolling hash.

The hash over a window ``b_1 .. b_k`` is::

    H = XOR_i rotl_q(T[b_i], k - i)

where ``rotl_q`` rotates left inside a ``q``-bit word and ``T`` is a table of
256 ``q``-bit values. Sliding the window by one byte costs O(1)::

    H' = rotl_q(H, 1) ^ rotl_q(T[out], k) ^ T[in]

A boundary fires when the ``q`` low bits of ``H`` are all zero. Because every
value is confined to ``q`` bits that is simply ``H == 0``.

The byte table is filled from a SplitMix64 stream (Steele et al.)::

    state = (state + 0x9E3779B97F4A7C15) mod 2**64
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) mod 2**64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) mod 2**64
    z = z ^ (z >> 31)
    T[i] = z & (2**q - 1)            for i = 0 .. 255, state starting at seed

Segmentation rules, applied to a list of serialized entries:

* entries are concatenated and hashed byte by byte;
* the rolling state is reset at every emitted split, so a boundary may only
  fire once ``k`` bytes of the current segment have been seen;
* a boundary inside an entry defers the split to the end of that entry;
* if appending the next entry would push the segment past
  ``max_node_bytes`` the segment is cut before it (forced cut);
* the final segment may end without a pattern.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from functools import lru_cache
from typing import Sequence

import numpy as np

from .errors import OversizeEntryError

_MASK64 = (1 << 64) - 1


def splitmix64(seed: int):
    """Yield the SplitMix64 stream for ``seed``."""
    state = seed & _MASK64
    while True:
        state = (state + 0x9E3779B97F4A7C15) & _MASK64
        z = state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
        yield z ^ (z >> 31)


def byte_map(seed: int, q: int) -> tuple[int, ...]:
    stream = splitmix64(seed)
    mask = (1 << q) - 1
    return tuple(next(stream) & mask for _ in range(256))


def rotl(value: int, shift: int, q: int) -> int:
    shift %= q
    mask = (1 << q) - 1
    return ((value << shift) | (value >> (q - shift))) & mask


@dataclass(frozen=True)
class ChunkerConfig:
    k: int = 16
    q: int = 12
    max_node_bytes: int | None = None
    seed: int = 0

    def __post_init__(self):
        if self.max_node_bytes is None:
            object.__setattr__(self, "max_node_bytes", 4 << self.q)
        if not 1 <= self.k <= 64:
            raise ValueError(f"window size k={self.k} outside [1, 64]")
        if not 4 <= self.q <= 20:
            raise ValueError(f"pattern bits q={self.q} outside [4, 20]")
        if self.max_node_bytes < 4 << self.q:
            raise ValueError(
                f"max_node_bytes={self.max_node_bytes} below 4*2^q={4 << self.q}")
        if not 0 <= self.seed <= _MASK64:
            raise ValueError("seed must fit in 64 bits")

    @property
    def expected_segment_bytes(self) -> int:
        return 1 << self.q

    def for_level(self, level: int) -> "ChunkerConfig":
        """Config for tree level ``level``: same shape, byte table seeded
        with ``seed + level``.

        Index entries repeat their split keys level after level; with one
        shared table a pattern inside a key would fire at every level and
        the tree would never converge to a single root.
        """
        if level == 0:
            return self
        return replace(self, seed=(self.seed + level) & _MASK64)


@dataclass(frozen=True)
class RollingHashState:
    window: bytes = b""
    current: int = 0
    k: int = 16
    q: int = 12

    @property
    def full(self) -> bool:
        return len(self.window) >= self.k


@dataclass
class SegmentationResult:
    splits: list[int]
    # True when the last segment ended at a pattern rather than at end of input
    closed: bool = False


class Chunker:
    """Rolling hash and entry segmentation for one :class:`ChunkerConfig`."""

    def __init__(self, config: ChunkerConfig | None = None):
        self.config = config or ChunkerConfig()
        k, q = self.config.k, self.config.q
        self.table = byte_map(self.config.seed, q)
        self._out_table = tuple(rotl(v, k, q) for v in self.table)
        self._table_np = np.array(self.table, dtype=np.uint32)

    # -- single-byte interface ------------------------------------------

    def initial_state(self) -> RollingHashState:
        return RollingHashState(b"", 0, self.config.k, self.config.q)

    def roll(self, state: RollingHashState, incoming: int) -> RollingHashState:
        k, q = state.k, state.q
        value = rotl(state.current, 1, q) ^ self.table[incoming]
        window = state.window + bytes((incoming,))
        if len(window) > k:
            value ^= self._out_table[window[0]]
            window = window[1:]
        return RollingHashState(window, value, k, q)

    def is_boundary(self, state: RollingHashState) -> bool:
        return state.current & ((1 << state.q) - 1) == 0

    def hash_window(self, window: bytes) -> int:
        """Hash ``window`` from scratch (no rolling)."""
        q = self.config.q
        value = 0
        n = len(window)
        for i, b in enumerate(window):
            value ^= rotl(self.table[b], n - 1 - i, q)
        return value

    # -- bulk interface --------------------------------------------------

    def window_hashes(self, buf: bytes) -> np.ndarray:
        """Hash of the ``k``-byte window ending at every offset of ``buf``.

        Entries at offsets below ``k - 1`` cover a partial window and are
        meaningless for boundary detection.
        """
        data = np.frombuffer(buf, dtype=np.uint8)
        n = data.size
        q = self.config.q
        mask = np.uint32((1 << q) - 1)

        def widen(right, left, shift):
            # joins windows: left one ends ``shift`` bytes before right one,
            # whose width is ``shift``, so left bytes gain ``shift`` rotations
            s = shift % q
            out = right.copy()
            if shift < n:
                moved = left[: n - shift]
                if s:
                    moved = ((moved << np.uint32(s)) | (moved >> np.uint32(q - s))) & mask
                out[shift:] ^= moved
            return out

        # binary decomposition of k over power-of-two window widths
        power, width = self._table_np[data], 1
        acc, acc_width = None, 0
        k = self.config.k
        while k:
            if k & 1:
                if acc is None:
                    acc, acc_width = power, width
                else:
                    acc, acc_width = widen(acc, power, acc_width), acc_width + width
            k >>= 1
            if k:
                power, width = widen(power, power, width), width * 2
        return acc

    def segment(self, entries: Sequence[bytes]) -> SegmentationResult:
        n = len(entries)
        if n == 0:
            return SegmentationResult([0], False)
        k = self.config.k
        limit = self.config.max_node_bytes
        sizes = np.fromiter((len(e) for e in entries), dtype=np.int64, count=n)
        if sizes.max() > limit:
            worst = int(sizes.argmax())
            raise OversizeEntryError(
                f"entry {worst} serializes to {int(sizes[worst])} bytes, "
                f"above max_node_bytes={limit}")
        ends = np.cumsum(sizes)
        hits = np.flatnonzero(self.window_hashes(b"".join(entries)) == 0)

        splits: list[int] = []
        closed = False
        first = 0
        start = 0
        while first < n:
            cut = n
            closed = False
            j = int(np.searchsorted(hits, start + k - 1, side="left"))
            if j < hits.size:
                # split after the entry containing the pattern's last byte
                cut = int(np.searchsorted(ends, hits[j], side="right")) + 1
                closed = True
            forced = int(np.searchsorted(ends, start + limit, side="right"))
            if forced < cut:
                cut, closed = forced, False
            splits.append(cut)
            start = int(ends[cut - 1])
            first = cut
        return SegmentationResult(splits, closed)


@lru_cache(maxsize=32)
def get_chunker(config: ChunkerConfig) -> Chunker:
    return Chunker(config)


def segment_entries(entries: Sequence[bytes], config: ChunkerConfig | None = None) -> list[int]:
    """Exclusive end index of every segment of ``entries``.

    An empty list yields ``[0]``: one empty segment.
    """
    return get_chunker(config or ChunkerConfig()).segment(entries).splits


def roll(state: RollingHashState, incoming: int, config: ChunkerConfig | None = None) -> RollingHashState:
    return get_chunker(config or ChunkerConfig(k=state.k, q=state.q)).roll(state, incoming)


def is_boundary(state: RollingHashState) -> bool:
    return state.current & ((1 << state.q) - 1) == 0
