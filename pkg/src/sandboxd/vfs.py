"""Shared overlay filesystem.

A writable in-memory upper layer sits over an optional read-only underlay
whose file contents are fetched lazily, at most once per path.  Deletions of
underlay entries install whiteout tombstones in the upper layer; the first
write to an underlay file copies it up.  All mutation happens on the kernel
loop; a per-path lock table serializes multi-step operations (those that
park on a content fetch) against conflicting namespace changes.

Operations use continuation style: `done(errno, value)` may be invoked
synchronously for the common in-memory case, or later after a provider
fetch completes.
"""

from __future__ import annotations

import json
import os
import posixpath
import time
import urllib.request
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Set, Tuple

from .errors import (
    EACCES,
    EEXIST,
    EINVAL,
    EIO,
    EISDIR,
    ENOENT,
    ENOTDIR,
    ENOTEMPTY,
    FsInitError,
)
from . import wire

DoneFn = Callable[[int, object], None]


def normalize(path: str) -> str:
    """Absolute, lexically normalized path ('..' never escapes the root)."""
    if not path.startswith("/"):
        path = "/" + path
    norm = posixpath.normpath(path)
    return norm if norm != "//" else "/"


def join_cwd(cwd: str, path: str) -> str:
    if path.startswith("/"):
        return normalize(path)
    return normalize(cwd.rstrip("/") + "/" + path)


# ---------------------------------------------------------------------------
# Underlay providers
# ---------------------------------------------------------------------------

class UnderlayProvider:
    """Read-only file source.  fetch() is only ever called for manifest paths
    and, through the overlay's cache, at most once per path."""

    def manifest(self) -> List[Tuple[str, int, str]]:
        raise NotImplementedError

    def fetch(self, path: str) -> bytes:
        raise NotImplementedError


class DirProvider(UnderlayProvider):
    """Underlay backed by a host directory; manifest built by walking it."""

    def __init__(self, root: str):
        self.root = os.path.abspath(root)

    def manifest(self) -> List[Tuple[str, int, str]]:
        out: List[Tuple[str, int, str]] = []
        for dirpath, dirnames, filenames in os.walk(self.root):
            rel = os.path.relpath(dirpath, self.root)
            base = "/" if rel == "." else "/" + rel.replace(os.sep, "/")
            if base != "/":
                out.append((base, 0, "d"))
            for fn in filenames:
                full = os.path.join(dirpath, fn)
                out.append((posixpath.join(base, fn), os.path.getsize(full), "f"))
        return out

    def fetch(self, path: str) -> bytes:
        with open(os.path.join(self.root, path.lstrip("/")), "rb") as f:
            return f.read()


class HttpProvider(UnderlayProvider):
    """Underlay served over HTTP: a manifest file at /.manifest.json listing
    {"p": path, "s": size, "k": "f"|"d"}, then one GET per file on demand."""

    MANIFEST_NAME = "/.manifest.json"

    def __init__(self, base_url: str, timeout: float = 30.0):
        self.base_url = base_url.rstrip("/")
        self.timeout = timeout

    def _get(self, path: str) -> bytes:
        url = self.base_url + urllib.request.quote(path)
        with urllib.request.urlopen(url, timeout=self.timeout) as resp:
            return resp.read()

    def manifest(self) -> List[Tuple[str, int, str]]:
        entries = json.loads(self._get(self.MANIFEST_NAME))
        return [(e["p"], int(e.get("s", 0)), e["k"]) for e in entries]

    def fetch(self, path: str) -> bytes:
        return self._get(path)


@dataclass
class FsConfig:
    underlay: Optional[UnderlayProvider] = None

    @classmethod
    def parse_underlay(cls, spec: str) -> "FsConfig":
        """Accepts 'dir:PATH' or an http(s) URL."""
        if spec.startswith("dir:"):
            return cls(underlay=DirProvider(spec[4:]))
        if spec.startswith("http://") or spec.startswith("https://"):
            return cls(underlay=HttpProvider(spec))
        raise ValueError(f"bad underlay spec: {spec!r}")


# ---------------------------------------------------------------------------
# Nodes
# ---------------------------------------------------------------------------

class Whiteout:
    """Upper-layer tombstone hiding a lower entry."""

    __slots__ = ()


WHITEOUT = Whiteout()


class Node:
    __slots__ = (
        "kind", "mode", "mtime_ns", "ino",
        "upper_content", "lower_size", "lower_cache",
        "children", "opaque", "lockpath",
    )

    def __init__(self, kind: str, mode: int, ino: int, lockpath: str):
        self.kind = kind  # "file" | "dir"
        self.mode = mode
        self.mtime_ns = time.time_ns()
        self.ino = ino
        self.upper_content: Optional[bytearray] = None
        self.lower_size: Optional[int] = None
        self.lower_cache: Optional[bytes] = None
        self.children: Optional[Dict[str, object]] = {} if kind == "dir" else None
        self.opaque = False
        self.lockpath = lockpath

    @property
    def is_upper(self) -> bool:
        return self.upper_content is not None or self.kind == "dir"

    def size(self) -> int:
        if self.kind == "dir":
            return 0
        if self.upper_content is not None:
            return len(self.upper_content)
        if self.lower_cache is not None:
            return len(self.lower_cache)
        return self.lower_size or 0

    def dtype(self) -> int:
        return wire.DT_DIR if self.kind == "dir" else wire.DT_REG


@dataclass
class FileHandle:
    node: Node
    pos: int = 0


@dataclass
class DirHandle:
    path: str
    ino: int
    snapshot: Optional[List[Tuple[str, int, int]]] = None
    offset: int = 0


@dataclass
class FdEntry:
    """Refcounted open object shared across tasks (spawn grants, fork)."""

    obj: object  # FileHandle | DirHandle | PipeEnd | SocketRef
    flags: int
    refcount: int = 1


# ---------------------------------------------------------------------------
# Path lock table
# ---------------------------------------------------------------------------

class LockTable:
    """Per-path operation locks.  Waiters are continuations, never threads;
    acquire() runs the continuation immediately when all paths are free."""

    def __init__(self):
        self._held: Dict[str, object] = {}
        self._waiting: List[Tuple[Tuple[str, ...], object, Callable[[], None]]] = []
        self._pumping = False

    def acquire(self, paths: Sequence[str], owner: object, fn: Callable[[], None]) -> None:
        want = tuple(sorted(set(paths)))
        for p in want:
            if self._held.get(p) is owner:
                raise AssertionError(f"reentrant lock acquire on {p}")
        if all(p not in self._held for p in want):
            for p in want:
                self._held[p] = owner
            fn()
        else:
            self._waiting.append((want, owner, fn))

    def release(self, paths: Sequence[str], owner: object) -> None:
        for p in sorted(set(paths)):
            if self._held.get(p) is owner:
                del self._held[p]
        self._pump()

    def _pump(self) -> None:
        if self._pumping:
            return
        self._pumping = True
        try:
            progress = True
            while progress:
                progress = False
                for i, (want, owner, fn) in enumerate(self._waiting):
                    if all(p not in self._held for p in want):
                        del self._waiting[i]
                        for p in want:
                            self._held[p] = owner
                        fn()
                        progress = True
                        break
        finally:
            self._pumping = False

    @property
    def held_count(self) -> int:
        return len(self._held)


# ---------------------------------------------------------------------------
# The overlay filesystem
# ---------------------------------------------------------------------------

class OverlayFs:
    def __init__(self, config: Optional[FsConfig], post_event: Callable[[Callable[[], None]], None]):
        self.provider = config.underlay if config else None
        self._post = post_event
        self._ino = iter(range(2, 1 << 62))
        self.root = Node("dir", 0o755, 1, "/")
        self.locks = LockTable()
        self._lower_files: Dict[str, int] = {}
        self._lower_dirs: Dict[str, Set[str]] = {}
        self._lower_nodes: Dict[str, Node] = {}
        self._path_inos: Dict[str, int] = {"/": 1}
        self._fetch_pending: Dict[str, List[Callable[[int], None]]] = {}
        self.fetch_counts: Dict[str, int] = {}
        self._executor = ThreadPoolExecutor(max_workers=2, thread_name_prefix="vfs-fetch")

    def shutdown(self) -> None:
        self._executor.shutdown(wait=False, cancel_futures=True)

    # -- boot ---------------------------------------------------------------

    def initialize(self, done: Callable[[Optional[Exception]], None]) -> None:
        """Build the underlay index (possibly fetching a manifest); calls
        done(None) or done(FsInitError) on the kernel loop."""
        if self.provider is None:
            done(None)
            return

        def work():
            try:
                entries = self.provider.manifest()
            except Exception as e:  # network / walk failure
                self._post(lambda: done(FsInitError(str(e))))
                return

            def install():
                try:
                    self._index_manifest(entries)
                except Exception as e:
                    done(FsInitError(str(e)))
                    return
                done(None)

            self._post(install)

        self._executor.submit(work)

    def _index_manifest(self, entries: Sequence[Tuple[str, int, str]]) -> None:
        self._lower_dirs["/"] = self._lower_dirs.get("/", set())
        for path, size, kind in entries:
            path = normalize(path)
            if path == "/":
                continue
            if kind == "f":
                self._lower_files[path] = size
            else:
                self._lower_dirs.setdefault(path, set())
            # register with all ancestors
            child = path
            parent = posixpath.dirname(child)
            while True:
                self._lower_dirs.setdefault(parent, set()).add(posixpath.basename(child))
                if parent == "/":
                    break
                child = parent
                parent = posixpath.dirname(parent)

    # -- low-level lookup -----------------------------------------------------

    def _pseudo_ino(self, path: str) -> int:
        ino = self._path_inos.get(path)
        if ino is None:
            ino = next(self._ino)
            self._path_inos[path] = ino
        return ino

    def _upper_walk(self, path: str) -> Tuple[Optional[object], Optional[Node], bool]:
        """Returns (entry, parent_node, parent_path_fully_upper).

        entry is a Node, WHITEOUT, or None when not present in upper.
        parent_node is the upper dir containing the basename, or None if the
        upper tree does not extend that far.
        """
        if path == "/":
            return self.root, None, True
        parts = path.strip("/").split("/")
        node: Node = self.root
        for comp in parts[:-1]:
            nxt = node.children.get(comp) if node.children is not None else None
            if not isinstance(nxt, Node):
                return None, None, False
            if nxt.kind != "dir":
                return None, None, False
            node = nxt
        entry = node.children.get(parts[-1])
        return entry, node, True

    def _lower_kind(self, path: str) -> Optional[str]:
        if path in self._lower_files:
            return "f"
        if path in self._lower_dirs:
            return "d"
        return None

    def _lower_visible(self, path: str) -> Optional[str]:
        """Lower kind at path, or None if hidden by a whiteout/opaque dir on
        the path itself or any ancestor."""
        kind = self._lower_kind(path)
        if kind is None:
            return None
        # check ancestors (and the path itself) for whiteouts / opaque dirs
        node: Node = self.root
        if path != "/":
            for comp in path.strip("/").split("/"):
                if node.opaque:
                    return None
                child = node.children.get(comp) if node.children is not None else None
                if child is WHITEOUT or isinstance(child, Whiteout):
                    return None
                if isinstance(child, Node):
                    if child.kind != "dir":
                        return None  # upper file shadows the lower subtree
                    node = child
                else:
                    # no upper entry at this level: lower continues to shine through
                    node = None  # type: ignore[assignment]
                    break
        if isinstance(node, Node) and node.opaque:
            return None
        return kind

    def _lower_node(self, path: str) -> Node:
        node = self._lower_nodes.get(path)
        if node is None:
            node = Node("file", 0o444, self._pseudo_ino(path), path)
            node.lower_size = self._lower_files[path]
            self._lower_nodes[path] = node
        return node

    # -- visibility ------------------------------------------------------------

    def lookup(self, path: str) -> Tuple[int, Optional[Node]]:
        """Merged-view lookup.  Returns (errno, node); lower files get their
        singleton node, lower dirs a transient dir node surrogate."""
        path = normalize(path)
        err, node = self._lookup_walk(path)
        return err, node

    def _lookup_walk(self, path: str) -> Tuple[int, Optional[Node]]:
        if path == "/":
            return 0, self.root
        # validate every intermediate component so ENOTDIR surfaces properly
        parts = path.strip("/").split("/")
        cur = "/"
        for comp in parts[:-1]:
            cur = posixpath.join(cur, comp)
            err, node = self._lookup_single(cur)
            if err:
                return ENOENT, None
            if node.kind != "dir":
                return ENOTDIR, None
        return self._lookup_single(path)

    def _lookup_single(self, path: str) -> Tuple[int, Optional[Node]]:
        entry, parent, _ = self._upper_walk(path)
        if isinstance(entry, Whiteout):
            return ENOENT, None
        if isinstance(entry, Node):
            return 0, entry
        lower = self._lower_visible(path)
        if lower == "f":
            return 0, self._lower_node(path)
        if lower == "d":
            surrogate = Node("dir", 0o555, self._pseudo_ino(path), path)
            return 0, surrogate
        return ENOENT, None

    def list_names(self, path: str) -> Tuple[int, Optional[List[str]]]:
        """Merged directory listing (no '.'/'..'), sorted."""
        path = normalize(path)
        err, node = self.lookup(path)
        if err:
            return err, None
        if node.kind != "dir":
            return ENOTDIR, None
        names: Set[str] = set()
        hidden: Set[str] = set()
        entry, _, _ = self._upper_walk(path)
        upper = entry if isinstance(entry, Node) else None
        opaque = False
        if upper is not None and upper.children is not None:
            opaque = upper.opaque
            for name, child in upper.children.items():
                if isinstance(child, Whiteout):
                    hidden.add(name)
                else:
                    names.add(name)
        if not opaque and self._lower_visible(path) == "d":
            for name in self._lower_dirs.get(path, ()):
                if name not in hidden:
                    names.add(name)
        return 0, sorted(names)

    def dir_snapshot(self, path: str) -> Tuple[int, Optional[List[Tuple[str, int, int]]]]:
        """Entries for getdents: '.', '..', then the merged listing."""
        err, names = self.list_names(path)
        if err:
            return err, None
        parent = posixpath.dirname(normalize(path)) or "/"
        out = [(".", self._pseudo_ino(normalize(path)), wire.DT_DIR),
               ("..", self._pseudo_ino(parent), wire.DT_DIR)]
        for name in names:
            child = posixpath.join(path, name)
            err2, node = self._lookup_single(normalize(child))
            if err2:
                continue
            out.append((name, node.ino, node.dtype()))
        return 0, out

    # -- fetch machinery ---------------------------------------------------------

    def _fetch(self, node: Node, after: Callable[[int], None]) -> None:
        """Ensure node.lower_cache is populated; at most one provider.fetch
        per path, concurrent requests piggyback on the pending list."""
        if node.upper_content is not None or node.lower_cache is not None:
            after(0)
            return
        path = node.lockpath
        pending = self._fetch_pending.get(path)
        if pending is not None:
            pending.append(after)
            return
        self._fetch_pending[path] = [after]
        self.fetch_counts[path] = self.fetch_counts.get(path, 0) + 1
        fut = self._executor.submit(self.provider.fetch, path)

        def on_done(f):
            def finish():
                waiters = self._fetch_pending.pop(path, [])
                try:
                    data = f.result()
                except Exception:
                    for w in waiters:
                        w(EIO)
                    return
                node.lower_cache = bytes(data)
                for w in waiters:
                    w(0)

            self._post(finish)

        fut.add_done_callback(on_done)

    # -- upper-tree mutation helpers ---------------------------------------------

    def _ensure_upper_dir(self, path: str) -> Tuple[int, Optional[Node]]:
        """Materialize upper directory nodes down to `path`, which must be a
        visible directory in the merged view."""
        if path == "/":
            return 0, self.root
        err, vis = self._lookup_walk(path)
        if err:
            return err, None
        if vis.kind != "dir":
            return ENOTDIR, None
        node = self.root
        cur = "/"
        for comp in path.strip("/").split("/"):
            cur = posixpath.join(cur, comp)
            child = node.children.get(comp)
            if isinstance(child, Node):
                node = child
                continue
            made = Node("dir", 0o755, self._pseudo_ino(cur), cur)
            node.children[comp] = made
            node = made
        return 0, node

    def _install_whiteout_if_lower(self, parent: Node, name: str, path: str) -> None:
        if self._lower_kind(path) is not None:
            parent.children[name] = Whiteout()
        else:
            parent.children.pop(name, None)

    # -- operations ---------------------------------------------------------------

    def open(self, path: str, flags: int, mode: int, done: DoneFn) -> None:
        path = normalize(path)
        owner = object()
        paths = (posixpath.dirname(path) or "/", path)

        def finish(err: int, value: object = None) -> None:
            self.locks.release(paths, owner)
            done(err, value)

        def go() -> None:
            accmode = flags & wire.O_ACCMODE
            wants_write = accmode != wire.O_RDONLY or bool(flags & wire.O_TRUNC)
            err, node = self._lookup_walk(path)
            if err == ENOENT and flags & wire.O_CREAT:
                perr, pnode = self._parent_dir_for_create(path)
                if perr:
                    finish(perr)
                    return
                name = posixpath.basename(path)
                fresh = Node("file", mode & 0o777, next(self._ino), path)
                fresh.upper_content = bytearray()
                pnode.children[name] = fresh
                pnode.mtime_ns = time.time_ns()
                finish(0, FileHandle(fresh))
                return
            if err:
                finish(err)
                return
            if flags & wire.O_CREAT and flags & wire.O_EXCL:
                finish(EEXIST)
                return
            if node.kind == "dir":
                if wants_write:
                    finish(EISDIR)
                    return
                finish(0, DirHandle(path=path, ino=node.ino))
                return
            if flags & wire.O_DIRECTORY:
                finish(ENOTDIR)
                return
            if not wants_write:
                finish(0, FileHandle(node))
                return
            # write access: copy up a lower-only file first
            if node.upper_content is None:
                if flags & wire.O_TRUNC:
                    self._copy_up(path, node, b"")
                    finish(0, FileHandle(node))
                    return

                def after_fetch(ferr: int) -> None:
                    if ferr:
                        finish(ferr)
                        return
                    self._copy_up(path, node, node.lower_cache or b"")
                    finish(0, FileHandle(node))

                self._fetch(node, after_fetch)
                return
            if flags & wire.O_TRUNC:
                node.upper_content = bytearray()
                node.mtime_ns = time.time_ns()
            finish(0, FileHandle(node))

        self.locks.acquire(paths, owner, go)

    def _parent_dir_for_create(self, path: str) -> Tuple[int, Optional[Node]]:
        parent = posixpath.dirname(path) or "/"
        err, vis = self._lookup_walk(parent)
        if err:
            return err, None
        if vis.kind != "dir":
            return ENOTDIR, None
        return self._ensure_upper_dir(parent)

    def _copy_up(self, path: str, node: Node, content: bytes) -> None:
        node.upper_content = bytearray(content)
        node.mode = node.mode | 0o200  # becomes writable in the upper layer
        node.mtime_ns = time.time_ns()
        err, pnode = self._ensure_upper_dir(posixpath.dirname(path) or "/")
        if not err:
            pnode.children[posixpath.basename(path)] = node

    def read_range(self, node: Node, off: int, n: int, done: DoneFn) -> None:
        """Positional read; fetches lazily for unmaterialized lower files."""
        if off < 0 or n < 0:
            done(EINVAL, None)
            return
        if node.upper_content is not None:
            done(0, bytes(node.upper_content[off:off + n]))
            return
        if node.lower_cache is not None:
            done(0, node.lower_cache[off:off + n])
            return

        def after(err: int) -> None:
            if err:
                done(err, None)
            else:
                done(0, node.lower_cache[off:off + n])

        self._fetch(node, after)

    def write_range(self, node: Node, off: int, data: bytes) -> Tuple[int, int]:
        """Positional write into an upper file; zero-fills any gap past EOF."""
        if off < 0:
            return EINVAL, 0
        if node.upper_content is None:
            # open() copies up before returning a writable handle
            raise AssertionError("write_range on unmaterialized node")
        buf = node.upper_content
        if off > len(buf):
            buf.extend(b"\x00" * (off - len(buf)))
        buf[off:off + len(data)] = data
        node.mtime_ns = time.time_ns()
        return 0, len(data)

    def stat(self, path: str) -> Tuple[int, Optional[wire.StatRecord]]:
        """Never fetches: lower sizes come from the manifest."""
        path = normalize(path)
        err, node = self.lookup(path)
        if err:
            return err, None
        return 0, self.stat_node(node)

    def stat_node(self, node: Node) -> wire.StatRecord:
        return wire.StatRecord(
            ino=node.ino,
            size=node.size(),
            mode=node.mode,
            dtype=node.dtype(),
            mtime_ns=node.mtime_ns,
        )

    def access(self, path: str, amode: int) -> int:
        path = normalize(path)
        err, node = self.lookup(path)
        if err:
            return err
        if amode == wire.F_OK:
            return 0
        mode = node.mode
        if amode & wire.R_OK and not mode & 0o444:
            return EACCES
        if amode & wire.W_OK and not mode & 0o222:
            return EACCES
        if amode & wire.X_OK and not mode & 0o111:
            return EACCES
        return 0

    def utimes(self, path: str, mtime_ns: int, done: DoneFn) -> None:
        path = normalize(path)
        owner = object()
        paths = (posixpath.dirname(path) or "/", path)

        def finish(err: int) -> None:
            self.locks.release(paths, owner)
            done(err, None)

        def go() -> None:
            err, node = self._lookup_walk(path)
            if err:
                finish(err)
                return
            if node.kind == "dir":
                uerr, unode = self._ensure_upper_dir(path)
                if uerr:
                    finish(uerr)
                    return
                unode.mtime_ns = mtime_ns
                finish(0)
                return
            if node.upper_content is None:
                def after(ferr: int) -> None:
                    if ferr:
                        finish(ferr)
                        return
                    self._copy_up(path, node, node.lower_cache or b"")
                    node.mtime_ns = mtime_ns
                    finish(0)

                self._fetch(node, after)
                return
            node.mtime_ns = mtime_ns
            finish(0)

        self.locks.acquire(paths, owner, go)

    def mkdir(self, path: str, mode: int, done: DoneFn) -> None:
        path = normalize(path)
        if path == "/":
            done(EEXIST, None)
            return
        owner = object()
        paths = (posixpath.dirname(path) or "/", path)

        def finish(err: int) -> None:
            self.locks.release(paths, owner)
            done(err, None)

        def go() -> None:
            err, _node = self._lookup_walk(path)
            if err == 0:
                finish(EEXIST)
                return
            if err != ENOENT:
                finish(err)
                return
            perr, pnode = self._parent_dir_for_create(path)
            if perr:
                finish(perr)
                return
            name = posixpath.basename(path)
            had_whiteout = isinstance(pnode.children.get(name), Whiteout)
            fresh = Node("dir", mode & 0o777, self._pseudo_ino(path), path)
            # a dir recreated over a deleted lower entry must not leak lower names
            fresh.opaque = had_whiteout and self._lower_kind(path) == "d"
            pnode.children[name] = fresh
            pnode.mtime_ns = time.time_ns()
            finish(0)

        self.locks.acquire(paths, owner, go)

    def unlink(self, path: str, done: DoneFn) -> None:
        path = normalize(path)
        owner = object()
        paths = (posixpath.dirname(path) or "/", path)

        def finish(err: int) -> None:
            self.locks.release(paths, owner)
            done(err, None)

        def go() -> None:
            err, node = self._lookup_walk(path)
            if err:
                finish(err)
                return
            if node.kind == "dir":
                finish(EISDIR)
                return
            perr, pnode = self._ensure_upper_dir(posixpath.dirname(path) or "/")
            if perr:
                finish(perr)
                return
            self._install_whiteout_if_lower(pnode, posixpath.basename(path), path)
            pnode.mtime_ns = time.time_ns()
            finish(0)

        self.locks.acquire(paths, owner, go)

    def rmdir(self, path: str, done: DoneFn) -> None:
        path = normalize(path)
        if path == "/":
            done(EINVAL, None)
            return
        owner = object()
        paths = (posixpath.dirname(path) or "/", path)

        def finish(err: int) -> None:
            self.locks.release(paths, owner)
            done(err, None)

        def go() -> None:
            err, node = self._lookup_walk(path)
            if err:
                finish(err)
                return
            if node.kind != "dir":
                finish(ENOTDIR)
                return
            lerr, names = self.list_names(path)
            if lerr:
                finish(lerr)
                return
            if names:
                finish(ENOTEMPTY)
                return
            perr, pnode = self._ensure_upper_dir(posixpath.dirname(path) or "/")
            if perr:
                finish(perr)
                return
            self._install_whiteout_if_lower(pnode, posixpath.basename(path), path)
            pnode.mtime_ns = time.time_ns()
            finish(0)

        self.locks.acquire(paths, owner, go)

    def read_file(self, path: str, done: DoneFn) -> None:
        """Whole-file read used by exec; fetches lazily."""
        path = normalize(path)
        err, node = self.lookup(path)
        if err:
            done(err, None)
            return
        if node.kind != "file":
            done(EISDIR, None)
            return
        self.read_range(node, 0, node.size(), done)

    # -- host staging ---------------------------------------------------------

    def install_file(self, path: str, data: bytes, mode: int = 0o644) -> None:
        """Direct upper-layer install (kernel loop only); used for staging."""
        path = normalize(path)
        err, pnode = self._ensure_upper_dir_chain(posixpath.dirname(path) or "/")
        if err:
            raise FsInitError(f"cannot stage {path}: errno {err}")
        name = posixpath.basename(path)
        node = Node("file", mode & 0o777, next(self._ino), path)
        node.upper_content = bytearray(data)
        pnode.children[name] = node

    def install_dir(self, path: str, mode: int = 0o755) -> None:
        path = normalize(path)
        err, _ = self._ensure_upper_dir_chain(path)
        if err:
            raise FsInitError(f"cannot stage dir {path}: errno {err}")

    def _ensure_upper_dir_chain(self, path: str) -> Tuple[int, Optional[Node]]:
        """Like _ensure_upper_dir but creates missing intermediate dirs."""
        if path == "/":
            return 0, self.root
        node = self.root
        cur = "/"
        for comp in path.strip("/").split("/"):
            cur = posixpath.join(cur, comp)
            child = node.children.get(comp)
            if isinstance(child, Whiteout) or child is None:
                made = Node("dir", 0o755, self._pseudo_ino(cur), cur)
                node.children[comp] = made
                node = made
            elif isinstance(child, Node):
                if child.kind != "dir":
                    return ENOTDIR, None
                node = child
        return 0, node
