"""The utility set.

Each tool implements the flag subset documented in docs/userland.md and
streams through the guest runtime's blocking facade, so the same code runs
under either syscall convention.  Output for sha1sum, wc (single-count
forms), sort and grep-on-literal-patterns is byte-identical with the GNU
tools under LC_ALL=C.
"""

from __future__ import annotations

import hashlib
import re
from typing import List, Optional, Tuple

from .. import wire
from ..errors import EEXIST, ENOENT, strerror
from ..guest import GuestContext, GuestOSError
from . import register

CHUNK = 65536


def _fail(ctx: GuestContext, tool: str, subject: str, err: int) -> int:
    ctx.stderr.write_str(f"{tool}: {subject}: {strerror(err)}\n")
    return 1


def _open_read(ctx: GuestContext, path: str) -> int:
    return ctx.open(path, wire.O_RDONLY)


def _read_whole(ctx: GuestContext, path: str) -> bytes:
    fd = _open_read(ctx, path)
    try:
        return ctx.read_all(fd)
    finally:
        ctx.close(fd)


def _inputs(ctx: GuestContext, files: List[str]) -> List[Tuple[str, Optional[str]]]:
    """(display-name, path-or-None) pairs; None means stdin."""
    if not files:
        return [("-", None)]
    return [(f, None if f == "-" else f) for f in files]


def _resolve_program(ctx: GuestContext, name: str) -> Optional[str]:
    if "/" in name:
        return name if ctx.access(name, wire.X_OK) == 0 else None
    path_env = ctx.environ.get("PATH", "/bin:/usr/bin")
    for d in path_env.split(":"):
        if not d:
            continue
        cand = d.rstrip("/") + "/" + name
        if ctx.access(cand, wire.X_OK) == 0:
            return cand
    return None


# -- cat -----------------------------------------------------------------------

def cat_main(ctx: GuestContext, argv: List[str]) -> int:
    files = [a for a in argv[1:] if a != "--"]
    status = 0
    for name, path in _inputs(ctx, files):
        try:
            fd = 0 if path is None else _open_read(ctx, path)
        except GuestOSError as e:
            status = _fail(ctx, "cat", name, e.errno)
            continue
        try:
            while True:
                data = ctx.read(fd, CHUNK)
                if not data:
                    break
                ctx.stdout.write(data)
        finally:
            if path is not None:
                ctx.close(fd)
    ctx.stdout.flush()
    return status


# -- cp ------------------------------------------------------------------------

def cp_main(ctx: GuestContext, argv: List[str]) -> int:
    args = argv[1:]
    if len(args) != 2:
        ctx.stderr.write_str("usage: cp SRC DST\n")
        return 1
    src, dst = args
    try:
        st = ctx.stat(src)
    except GuestOSError as e:
        return _fail(ctx, "cp", src, e.errno)
    if st.is_dir:
        ctx.stderr.write_str(f"cp: {src}: is a directory (not supported)\n")
        return 1
    try:
        dst_st = ctx.stat(dst)
        if dst_st.is_dir:
            dst = dst.rstrip("/") + "/" + src.rsplit("/", 1)[-1]
    except GuestOSError:
        pass
    try:
        data = _read_whole(ctx, src)
        out = ctx.open(dst, wire.O_WRONLY | wire.O_CREAT | wire.O_TRUNC, st.mode & 0o777)
        ctx.write_all(out, data)
        ctx.close(out)
    except GuestOSError as e:
        return _fail(ctx, "cp", dst, e.errno)
    return 0


# -- echo ----------------------------------------------------------------------

def echo_main(ctx: GuestContext, argv: List[str]) -> int:
    args = argv[1:]
    newline = True
    if args and args[0] == "-n":
        newline = False
        args = args[1:]
    ctx.stdout.write_str(" ".join(args) + ("\n" if newline else ""))
    ctx.stdout.flush()
    return 0


# -- grep ----------------------------------------------------------------------

def _bre_to_python(pattern: str) -> bytes:
    """Translate the supported BRE subset (literal, . * ^ $ [...]) into a
    Python regex; ERE-only operators are literals in BRE."""
    out: List[str] = []
    i = 0
    while i < len(pattern):
        ch = pattern[i]
        if ch == "\\" and i + 1 < len(pattern):
            out.append(re.escape(pattern[i + 1]))
            i += 2
            continue
        if ch in "+?{}()|":
            out.append("\\" + ch)
        else:
            out.append(ch)
        i += 1
    return "".join(out).encode("utf-8", "surrogateescape")


def grep_main(ctx: GuestContext, argv: List[str]) -> int:
    args = argv[1:]
    invert = False
    count_only = False
    while args and args[0].startswith("-") and args[0] not in ("-", "--"):
        if args[0] == "-v":
            invert = True
        elif args[0] == "-c":
            count_only = True
        else:
            ctx.stderr.write_str(f"grep: unsupported option {args[0]}\n")
            return 2
        args = args[1:]
    if not args:
        ctx.stderr.write_str("usage: grep [-v] [-c] PATTERN [FILE...]\n")
        return 2
    pattern, files = args[0], args[1:]
    try:
        rx = re.compile(_bre_to_python(pattern))
    except re.error as e:
        ctx.stderr.write_str(f"grep: bad pattern: {e}\n")
        return 2
    many = len(files) > 1
    matched_any = False
    status_err = False
    for name, path in _inputs(ctx, files):
        try:
            data = ctx.read_all(0) if path is None else _read_whole(ctx, path)
        except GuestOSError as e:
            _fail(ctx, "grep", name, e.errno)
            status_err = True
            continue
        lines = data.split(b"\n")
        if lines and lines[-1] == b"":
            lines.pop()
        hits = 0
        for line in lines:
            if bool(rx.search(line)) != invert:
                hits += 1
                matched_any = True
                if not count_only:
                    prefix = name.encode() + b":" if many else b""
                    ctx.stdout.write(prefix + line + b"\n")
        if count_only:
            prefix = f"{name}:" if many else ""
            ctx.stdout.write_str(f"{prefix}{hits}\n")
    ctx.stdout.flush()
    if status_err:
        return 2
    return 0 if matched_any else 1


# -- head / tail ------------------------------------------------------------------

def _line_count_flag(args: List[str], default: int = 10) -> Tuple[int, List[str], Optional[str]]:
    n = default
    rest: List[str] = []
    i = 0
    while i < len(args):
        a = args[i]
        if a == "-n":
            if i + 1 >= len(args):
                return n, rest, "option -n requires an argument"
            try:
                n = int(args[i + 1])
            except ValueError:
                return n, rest, f"bad line count: {args[i + 1]!r}"
            i += 2
            continue
        if a.startswith("-n"):
            try:
                n = int(a[2:])
            except ValueError:
                return n, rest, f"bad line count: {a!r}"
            i += 1
            continue
        rest.append(a)
        i += 1
    return n, rest, None


def _split_lines(data: bytes) -> List[bytes]:
    """Lines with their newlines kept; a final unterminated line is kept as is."""
    if not data:
        return []
    lines = data.split(b"\n")
    tail = lines.pop()  # b"" when data ends with a newline
    out = [ln + b"\n" for ln in lines]
    if tail:
        out.append(tail)
    return out


def head_main(ctx: GuestContext, argv: List[str]) -> int:
    n, files, err = _line_count_flag(argv[1:])
    if err:
        ctx.stderr.write_str(f"head: {err}\n")
        return 1
    status = 0
    for name, path in _inputs(ctx, files):
        try:
            data = ctx.read_all(0) if path is None else _read_whole(ctx, path)
        except GuestOSError as e:
            status = _fail(ctx, "head", name, e.errno)
            continue
        for line in _split_lines(data)[:n]:
            ctx.stdout.write(line)
    ctx.stdout.flush()
    return status


def tail_main(ctx: GuestContext, argv: List[str]) -> int:
    n, files, err = _line_count_flag(argv[1:])
    if err:
        ctx.stderr.write_str(f"tail: {err}\n")
        return 1
    status = 0
    for name, path in _inputs(ctx, files):
        try:
            data = ctx.read_all(0) if path is None else _read_whole(ctx, path)
        except GuestOSError as e:
            status = _fail(ctx, "tail", name, e.errno)
            continue
        lines = _split_lines(data)
        for line in (lines[-n:] if n > 0 else []):
            ctx.stdout.write(line)
    ctx.stdout.flush()
    return status


# -- ls ------------------------------------------------------------------------

def ls_main(ctx: GuestContext, argv: List[str]) -> int:
    args = argv[1:]
    all_entries = False
    while args and args[0].startswith("-") and args[0] != "--":
        if args[0] == "-a":
            all_entries = True
        else:
            ctx.stderr.write_str(f"ls: unsupported option {args[0]}\n")
            return 2
        args = args[1:]
    paths = args or ["."]
    status = 0
    many = len(paths) > 1
    first = True
    for path in paths:
        try:
            st = ctx.stat(path)
        except GuestOSError as e:
            status = _fail(ctx, "ls", path, e.errno)
            continue
        if not st.is_dir:
            ctx.stdout.write_str(path + "\n")
            continue
        try:
            names = ctx.readdir(path)
        except GuestOSError as e:
            status = _fail(ctx, "ls", path, e.errno)
            continue
        if all_entries:
            names = [".", ".."] + names
        if many:
            if not first:
                ctx.stdout.write_str("\n")
            ctx.stdout.write_str(f"{path}:\n")
        for name in sorted(names):
            ctx.stdout.write_str(name + "\n")
        first = False
    ctx.stdout.flush()
    return status


# -- mkdir / rmdir / rm / touch -----------------------------------------------------

def mkdir_main(ctx: GuestContext, argv: List[str]) -> int:
    args = argv[1:]
    parents = False
    if args and args[0] == "-p":
        parents = True
        args = args[1:]
    if not args:
        ctx.stderr.write_str("usage: mkdir [-p] DIR...\n")
        return 1
    status = 0
    for path in args:
        if parents:
            parts = path.strip("/").split("/")
            prefix = "/" if path.startswith("/") else ""
            for i in range(len(parts)):
                sub = prefix + "/".join(parts[:i + 1])
                try:
                    ctx.mkdir(sub)
                except GuestOSError as e:
                    if e.errno == EEXIST:
                        continue
                    status = _fail(ctx, "mkdir", sub, e.errno)
                    break
        else:
            try:
                ctx.mkdir(path)
            except GuestOSError as e:
                status = _fail(ctx, "mkdir", path, e.errno)
    return status


def rmdir_main(ctx: GuestContext, argv: List[str]) -> int:
    status = 0
    for path in argv[1:]:
        try:
            ctx.rmdir(path)
        except GuestOSError as e:
            status = _fail(ctx, "rmdir", path, e.errno)
    return status


def _rm_tree(ctx: GuestContext, path: str) -> None:
    st = ctx.stat(path)
    if st.is_dir:
        for name in ctx.readdir(path):
            _rm_tree(ctx, path.rstrip("/") + "/" + name)
        ctx.rmdir(path)
    else:
        ctx.unlink(path)


def rm_main(ctx: GuestContext, argv: List[str]) -> int:
    args = argv[1:]
    force = False
    recursive = False
    while args and args[0] in ("-f", "-r", "-rf", "-fr"):
        if "f" in args[0]:
            force = True
        if "r" in args[0]:
            recursive = True
        args = args[1:]
    status = 0
    for path in args:
        try:
            if recursive:
                _rm_tree(ctx, path)
            else:
                ctx.unlink(path)
        except GuestOSError as e:
            if force and e.errno == ENOENT:
                continue
            status = _fail(ctx, "rm", path, e.errno)
    return status


def touch_main(ctx: GuestContext, argv: List[str]) -> int:
    import time
    status = 0
    now = time.time_ns()
    for path in argv[1:]:
        try:
            ctx.utimes(path, now, now)
        except GuestOSError as e:
            if e.errno != ENOENT:
                status = _fail(ctx, "touch", path, e.errno)
                continue
            try:
                fd = ctx.open(path, wire.O_WRONLY | wire.O_CREAT)
                ctx.close(fd)
            except GuestOSError as e2:
                status = _fail(ctx, "touch", path, e2.errno)
    return status


# -- sha1sum ----------------------------------------------------------------------

def sha1sum_main(ctx: GuestContext, argv: List[str]) -> int:
    status = 0
    for name, path in _inputs(ctx, argv[1:]):
        h = hashlib.sha1()
        try:
            fd = 0 if path is None else _open_read(ctx, path)
        except GuestOSError as e:
            status = _fail(ctx, "sha1sum", name, e.errno)
            continue
        try:
            while True:
                data = ctx.read(fd, CHUNK)
                if not data:
                    break
                h.update(data)
        finally:
            if path is not None:
                ctx.close(fd)
        ctx.stdout.write_str(f"{h.hexdigest()}  {name}\n")
    ctx.stdout.flush()
    return status


# -- sort ----------------------------------------------------------------------

def sort_main(ctx: GuestContext, argv: List[str]) -> int:
    args = argv[1:]
    reverse = False
    if args and args[0] == "-r":
        reverse = True
        args = args[1:]
    lines: List[bytes] = []
    status = 0
    for name, path in _inputs(ctx, args):
        try:
            data = ctx.read_all(0) if path is None else _read_whole(ctx, path)
        except GuestOSError as e:
            status = _fail(ctx, "sort", name, e.errno)
            continue
        if data:
            batch = data.split(b"\n")
            if batch and batch[-1] == b"":
                batch.pop()
            lines.extend(batch)
    lines.sort(reverse=reverse)
    for line in lines:
        ctx.stdout.write(line + b"\n")
    ctx.stdout.flush()
    return status


# -- stat ----------------------------------------------------------------------

def stat_main(ctx: GuestContext, argv: List[str]) -> int:
    status = 0
    for path in argv[1:]:
        try:
            st = ctx.stat(path)
        except GuestOSError as e:
            status = _fail(ctx, "stat", path, e.errno)
            continue
        kind = "directory" if st.is_dir else "regular file"
        ctx.stdout.write_str(
            f"{path}: size={st.size} kind={kind} mode={st.mode:04o} ino={st.ino}\n")
    ctx.stdout.flush()
    return status


# -- tee ----------------------------------------------------------------------

def tee_main(ctx: GuestContext, argv: List[str]) -> int:
    args = argv[1:]
    append = False
    if args and args[0] == "-a":
        append = True
        args = args[1:]
    fds: List[int] = []
    status = 0
    for path in args:
        flags = wire.O_WRONLY | wire.O_CREAT | (wire.O_APPEND if append else wire.O_TRUNC)
        try:
            fds.append(ctx.open(path, flags))
        except GuestOSError as e:
            status = _fail(ctx, "tee", path, e.errno)
    while True:
        data = ctx.read(0, CHUNK)
        if not data:
            break
        ctx.stdout.write(data)
        for fd in fds:
            ctx.write_all(fd, data)
    ctx.stdout.flush()
    for fd in fds:
        ctx.close(fd)
    return status


# -- wc ----------------------------------------------------------------------

def wc_main(ctx: GuestContext, argv: List[str]) -> int:
    args = argv[1:]
    want: List[str] = []
    while args and args[0].startswith("-") and args[0] != "-":
        for ch in args[0][1:]:
            if ch == "c":
                want.append("bytes")
            elif ch == "l":
                want.append("lines")
            elif ch == "w":
                want.append("words")
            else:
                ctx.stderr.write_str(f"wc: unsupported option -{ch}\n")
                return 1
        args = args[1:]
    if not want:
        want = ["lines", "words", "bytes"]
    status = 0
    totals = {"lines": 0, "words": 0, "bytes": 0}
    results: List[Tuple[str, dict]] = []
    for name, path in _inputs(ctx, args):
        try:
            data = ctx.read_all(0) if path is None else _read_whole(ctx, path)
        except GuestOSError as e:
            status = _fail(ctx, "wc", name, e.errno)
            continue
        counts = {
            "lines": data.count(b"\n"),
            "words": len(data.split()),
            "bytes": len(data),
        }
        for k in totals:
            totals[k] += counts[k]
        results.append((name, counts))
    for name, counts in results:
        nums = " ".join(str(counts[k]) for k in ("lines", "words", "bytes") if k in want)
        suffix = "" if name == "-" and not args else f" {name}"
        ctx.stdout.write_str(nums + suffix + "\n")
    if len(results) > 1:
        nums = " ".join(str(totals[k]) for k in ("lines", "words", "bytes") if k in want)
        ctx.stdout.write_str(nums + " total\n")
    ctx.stdout.flush()
    return status


# -- xargs ----------------------------------------------------------------------

def xargs_main(ctx: GuestContext, argv: List[str]) -> int:
    cmd = argv[1:] or ["echo"]
    data = ctx.read_all(0)
    items = data.decode("utf-8", "replace").split()
    prog = _resolve_program(ctx, cmd[0])
    if prog is None:
        ctx.stderr.write_str(f"xargs: {cmd[0]}: command not found\n")
        return 127
    full_argv = list(cmd) + items
    pid = ctx.spawn(prog, full_argv)
    _, st = ctx.wait4(pid, 0)
    from ..errors import status_to_shell
    return status_to_shell(st)


def _register_all() -> None:
    register("cat", cat_main)
    register("cp", cp_main)
    register("echo", echo_main)
    register("grep", grep_main)
    register("head", head_main)
    register("ls", ls_main)
    register("mkdir", mkdir_main)
    register("rm", rm_main)
    register("rmdir", rmdir_main)
    register("sha1sum", sha1sum_main)
    register("sort", sort_main)
    register("stat", stat_main)
    register("tail", tail_main)
    register("tee", tee_main)
    register("touch", touch_main)
    register("wc", wc_main)
    register("xargs", xargs_main)


_register_all()
