"""Versioned, deduplicating, tamper-evident key-value storage built on a
content-defined Merkle search tree."""

from .chunk_store import Chunk, FileStore, Kind, MemoryStore, NodeId, StoreStats
from .chunker import Chunker, ChunkerConfig, segment_entries
from .diff_merge import DiffResult, MergeOutcome, diff, merge3
from .errors import *  # noqa: F401,F403
from .pos_tree import TreeRef, build, insert, lookup, remove, scan, update
from .repository import EngineConfig, LoadReport, Repository
from .version import BranchTable, FNode, MergeResult, ValueType, VerificationReport, verify

__version__ = "0.1.0"
