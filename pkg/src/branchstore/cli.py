"""Command-line interface.

Exit codes follow git-diff: 0 for success (or an empty diff), 1 for a
non-empty diff, a failed verification or a merge conflict, 2 for errors.
"""

from __future__ import annotations

import argparse
import fcntl
import json
import os
import sys
from pathlib import Path

from .chunker import ChunkerConfig
from .diff_merge import escape, unescape
from .errors import BranchStoreError, StoreLockedError
from .repository import DEFAULT_BRANCH, Repository
from .version import ValueType

LOCK_NAME = "lock"


class _StoreLock:
    def __init__(self, path: Path):
        self.path = path / LOCK_NAME
        self.fd = None

    def __enter__(self):
        self.fd = os.open(self.path, os.O_RDWR | os.O_CREAT, 0o644)
        try:
            fcntl.flock(self.fd, fcntl.LOCK_EX | fcntl.LOCK_NB)
        except BlockingIOError:
            os.close(self.fd)
            raise StoreLockedError(f"store {self.path.parent} is in use by another process") from None
        return self

    def __exit__(self, *exc):
        fcntl.flock(self.fd, fcntl.LOCK_UN)
        os.close(self.fd)


def _emit(args, payload, text_lines):
    if getattr(args, "json", False):
        print(json.dumps(payload, sort_keys=True))
    else:
        for line in text_lines:
            print(line)


def _pair(text: str) -> tuple[bytes, bytes]:
    key, sep, value = text.partition("=")
    if not sep:
        raise argparse.ArgumentTypeError(f"expected KEY=VALUE, got {text!r}")
    return unescape(key), unescape(value)


# -- verbs ---------------------------------------------------------------

def cmd_init(repo_path, args):
    chunker = ChunkerConfig(k=args.k, q=args.q, max_node_bytes=args.max_node_bytes, seed=args.seed)
    Repository.init(repo_path, chunker).close()
    print(f"initialized store at {repo_path}")
    return 0


def cmd_put(repo, args):
    if args.file is not None:
        data = sys.stdin.buffer.read() if args.file == "-" else Path(args.file).read_bytes()
        uid = repo.put(args.key, data, args.branch, args.message)
    elif args.set or args.delete:
        uid = repo.update(args.key, set=args.set or (), delete=[unescape(d) for d in args.delete or ()],
                          branch=args.branch, message=args.message)
    else:
        raise BranchStoreError("nothing to put: give --file, --set or --delete")
    print(uid)
    return 0


def cmd_get(repo, args):
    value = repo.get(args.key, args.ref, verify=args.verify)
    if isinstance(value, bytes):
        if args.json:
            _emit(args, {"type": "blob", "value": escape(value)}, [])
        else:
            sys.stdout.buffer.write(value)
        return 0
    _emit(args, {"type": "map", "entries": [[escape(k), escape(v)] for k, v in sorted(value.items())]},
          (f"{escape(k)}\t{escape(v)}" for k, v in sorted(value.items())))
    return 0


def cmd_select(repo, args):
    lo = unescape(args.lo) if args.lo is not None else None
    hi = unescape(args.hi) if args.hi is not None else None
    rows = repo.select(args.key, args.ref, lo, hi)
    if args.raw:
        for _, value in rows:
            sys.stdout.buffer.write(value + b"\n")
        return 0
    _emit(args, {"entries": [[escape(k), escape(v)] for k, v in rows]},
          (f"{escape(k)}\t{escape(v)}" for k, v in rows))
    return 0


def cmd_load_csv(repo, args):
    uid, report = repo.load_csv(args.path, args.key, args.key_column, args.branch, args.message)
    payload = {
        "uid": str(uid), "rows": report.rows, "new_payload_bytes": report.new_payload_bytes,
        "new_chunks": report.new_chunks, "dedup_hits": report.dedup_hits,
    }
    _emit(args, payload, [
        str(uid),
        f"rows {report.rows}, new payload {report.new_payload_bytes / 1000:.2f} KB "
        f"in {report.new_chunks} chunks, {report.dedup_hits} deduplicated",
    ])
    return 0


def cmd_diff(repo, args):
    result = repo.diff(args.key, args.ref_a, args.ref_b)
    payload = {
        "added": [[escape(k), escape(v)] for k, v in result.added],
        "removed": [[escape(k), escape(v)] for k, v in result.removed],
        "modified": [[escape(k), escape(a), escape(b)] for k, a, b in result.modified],
    }
    _emit(args, payload, [*result.lines(), result.summary()])
    return 1 if result else 0


def cmd_branch(repo, args):
    print(repo.branch(args.key, args.name, args.source))
    return 0


def cmd_merge(repo, args):
    result = repo.merge(args.key, args.dst, args.src, args.message)
    payload = {"status": result.status, "uid": str(result.uid) if result.uid else None,
               "conflicts": [escape(k) for k in result.conflicts]}
    lines = [f"{result.status} {result.uid or ''}".rstrip()]
    lines += [f"conflict {escape(k)}" for k in result.conflicts]
    _emit(args, payload, lines)
    return 1 if result.status == "conflict" else 0


def cmd_head(repo, args):
    uid = repo.head(args.key, args.branch)
    _emit(args, {"key": args.key, "branch": args.branch, "uid": str(uid)}, [str(uid)])
    return 0


def cmd_latest(repo, args):
    heads = repo.latest(args.key)
    _emit(args, {"key": args.key, "heads": {b: str(u) for b, u in heads.items()}},
          (f"{b}\t{u}" for b, u in heads.items()))
    return 0


def cmd_log(repo, args):
    history = repo.log(args.key, args.ref, args.limit)
    entries = [{
        "uid": str(uid), "bases": [str(b) for b in node.bases], "message": node.message,
        "type": node.value_type.name.lower(), "entries": node.entry_count,
    } for uid, node in history]
    lines = []
    for e in entries:
        lines.append(f"version {e['uid']}")
        if len(e["bases"]) > 1:
            lines.append("merge   " + " ".join(e["bases"]))
        elif e["bases"]:
            lines.append(f"parent  {e['bases'][0]}")
        lines.append(f"    {e['message']}")
    _emit(args, {"key": args.key, "versions": entries}, lines)
    return 0


def cmd_verify(repo, args):
    report = repo.verify(args.key, args.ref, args.depth)
    payload = {"ok": report.ok, "bad_chunk": str(report.bad_chunk) if report.bad_chunk else None,
               "reason": report.reason, "chunks_checked": report.chunks_checked,
               "versions_checked": report.versions_checked}
    if report.ok:
        lines = [f"pass: {report.versions_checked} versions, {report.chunks_checked} chunks verified"]
    else:
        lines = [f"FAIL: chunk {report.bad_chunk}: {report.reason}"]
    _emit(args, payload, lines)
    return 0 if report.ok else 1


def cmd_stat(repo, args):
    s = repo.stat()
    payload = {"chunk_count": s.chunk_count, "total_payload_bytes": s.total_payload_bytes,
               "put_requests": s.put_requests, "dedup_hits": s.dedup_hits,
               "dedup_ratio": round(s.dedup_ratio, 6), "keys": repo.keys()}
    _emit(args, payload, [
        f"chunks          {s.chunk_count}",
        f"payload bytes   {s.total_payload_bytes}",
        f"put requests    {s.put_requests}",
        f"dedup hits      {s.dedup_hits}",
        f"dedup ratio     {s.dedup_ratio:.4f}",
        f"keys            {' '.join(repo.keys())}",
    ])
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="branchstore", description="Versioned, deduplicating, tamper-evident key-value store.")
    parser.add_argument("--store", default=os.environ.get("BRANCHSTORE_DIR", "store"),
                        help="store directory (default: $BRANCHSTORE_DIR or ./store)")
    sub = parser.add_subparsers(dest="verb", required=True)

    def verb(name, func, help, json_flag=False):
        p = sub.add_parser(name, help=help)
        p.set_defaults(func=func)
        if json_flag:
            p.add_argument("--json", action="store_true", help="machine-readable output")
        return p

    defaults = ChunkerConfig()
    p = verb("init", cmd_init, "create a store")
    p.add_argument("--k", type=int, default=defaults.k)
    p.add_argument("--q", type=int, default=defaults.q)
    p.add_argument("--max-node-bytes", type=int, default=None)
    p.add_argument("--seed", type=int, default=defaults.seed)

    p = verb("put", cmd_put, "commit a blob or map edits")
    p.add_argument("key")
    p.add_argument("-b", "--branch", default=DEFAULT_BRANCH)
    p.add_argument("-m", "--message")
    p.add_argument("--file", help="commit this file (or - for stdin) as a blob")
    p.add_argument("--set", action="append", type=_pair, metavar="K=V")
    p.add_argument("--delete", action="append", metavar="K")

    p = verb("get", cmd_get, "print a value", json_flag=True)
    p.add_argument("key")
    p.add_argument("ref", nargs="?", default=DEFAULT_BRANCH)
    p.add_argument("--verify", action="store_true", help="verify before reading")

    p = verb("select", cmd_select, "range query over a map", json_flag=True)
    p.add_argument("key")
    p.add_argument("ref", nargs="?", default=DEFAULT_BRANCH)
    p.add_argument("--from", dest="lo")
    p.add_argument("--to", dest="hi")
    p.add_argument("--raw", action="store_true", help="print only values, one per line")

    p = verb("load-csv", cmd_load_csv, "load a CSV file as a map", json_flag=True)
    p.add_argument("key")
    p.add_argument("path")
    p.add_argument("--key-column", required=True)
    p.add_argument("-b", "--branch", default=DEFAULT_BRANCH)
    p.add_argument("-m", "--message")

    p = verb("diff", cmd_diff, "differences between two versions", json_flag=True)
    p.add_argument("key")
    p.add_argument("ref_a")
    p.add_argument("ref_b")

    p = verb("branch", cmd_branch, "create a branch")
    p.add_argument("key")
    p.add_argument("name")
    p.add_argument("source", nargs="?", default=DEFAULT_BRANCH)

    p = verb("merge", cmd_merge, "merge SRC into DST", json_flag=True)
    p.add_argument("key")
    p.add_argument("dst")
    p.add_argument("src")
    p.add_argument("-m", "--message")

    p = verb("head", cmd_head, "head version of a branch", json_flag=True)
    p.add_argument("key")
    p.add_argument("branch", nargs="?", default=DEFAULT_BRANCH)

    p = verb("latest", cmd_latest, "head of every branch", json_flag=True)
    p.add_argument("key")

    p = verb("log", cmd_log, "version history, newest first", json_flag=True)
    p.add_argument("key")
    p.add_argument("ref", nargs="?", default=DEFAULT_BRANCH)
    p.add_argument("-n", "--limit", type=int)

    p = verb("verify", cmd_verify, "check a version and its history", json_flag=True)
    p.add_argument("key")
    p.add_argument("ref", nargs="?", default=DEFAULT_BRANCH)
    p.add_argument("--depth", type=int, help="ancestor depth to check (default: all)")

    verb("stat", cmd_stat, "store statistics", json_flag=True)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    path = Path(args.store)
    try:
        if args.verb == "init":
            return cmd_init(path, args)
        with _StoreLock(path) if path.is_dir() else _missing(path):
            with Repository.open(path) as repo:
                return args.func(repo, args)
    except BranchStoreError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def _missing(path):
    raise BranchStoreError(f"no store at {path} (run init first)")


if __name__ == "__main__":
    sys.exit(main())
