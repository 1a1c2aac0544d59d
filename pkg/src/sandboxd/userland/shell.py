"""A small POSIX-subset shell.

Grammar: simple commands of words with optional VAR=val assignment prefixes,
pipelines with |, redirections < > >> 2>, sequencing with ;, background &,
$VAR and $? expansion, single/double quotes, # comments.  No globbing,
functions, command substitution or subshells (documented in
docs/userland.md).

Conventions: syntax errors return 2, command-not-found 127; a pipeline's
status is its last member's; & detaches and SIGCHLD reaps in the background.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

from .. import wire
from ..errors import (
    EACCES, ECHILD, EINTR, ENOENT, status_to_shell, strerror,
)
from ..guest import GuestContext, GuestExit, GuestOSError
from . import register


class ShellSyntaxError(Exception):
    pass


# -- AST -------------------------------------------------------------------

@dataclass(frozen=True)
class Seg:
    text: str
    quoted: bool  # single-quoted: no expansion


@dataclass(frozen=True)
class Word:
    segs: Tuple[Seg, ...]


@dataclass(frozen=True)
class Redirect:
    fd: int
    op: str  # "<", ">", ">>"
    target: Word


@dataclass(frozen=True)
class Command:
    assigns: Tuple[Tuple[str, Word], ...]
    words: Tuple[Word, ...]
    redirs: Tuple[Redirect, ...]


@dataclass(frozen=True)
class Pipeline:
    commands: Tuple[Command, ...]


@dataclass(frozen=True)
class Item:
    pipeline: Pipeline
    background: bool


_ASSIGN_RE = re.compile(r"^[A-Za-z_][A-Za-z0-9_]*$")
_VAR_RE = re.compile(r"\$(\?|[A-Za-z_][A-Za-z0-9_]*)")


# -- tokenizer -------------------------------------------------------------------

_OPS = ("|", ";", "&", "<", ">>", ">", "2>")


def tokenize(line: str) -> List[object]:
    """Returns a list of Word objects and operator strings."""
    toks: List[object] = []
    segs: List[Seg] = []
    cur: List[str] = []
    cur_quoted = False  # current run is inside single quotes

    def flush_run() -> None:
        nonlocal cur
        if cur:
            segs.append(Seg("".join(cur), cur_quoted))
            cur = []

    def flush_word() -> None:
        nonlocal segs
        flush_run()
        if segs:
            toks.append(Word(tuple(segs)))
            segs = []

    i = 0
    n = len(line)
    while i < n:
        ch = line[i]
        if ch == "'":
            flush_run()
            j = line.find("'", i + 1)
            if j < 0:
                raise ShellSyntaxError("unterminated single quote")
            segs.append(Seg(line[i + 1:j], True))
            i = j + 1
            continue
        if ch == '"':
            j = i + 1
            buf: List[str] = []
            while j < n and line[j] != '"':
                buf.append(line[j])
                j += 1
            if j >= n:
                raise ShellSyntaxError("unterminated double quote")
            flush_run()
            segs.append(Seg("".join(buf), False))
            i = j + 1
            continue
        if ch in " \t":
            flush_word()
            i += 1
            continue
        if ch == "#" and not segs and not cur:
            break  # comment to end of line
        if ch == "2" and i + 1 < n and line[i + 1] == ">" and not cur and not segs:
            toks.append("2>")
            i += 2
            continue
        if ch == ">":
            flush_word()
            if i + 1 < n and line[i + 1] == ">":
                toks.append(">>")
                i += 2
            else:
                toks.append(">")
                i += 1
            continue
        if ch in "|;&<":
            flush_word()
            toks.append(ch)
            i += 1
            continue
        cur.append(ch)
        i += 1
    flush_word()
    return toks


# -- parser -------------------------------------------------------------------

def parse_line(line: str) -> List[Item]:
    toks = tokenize(line)
    items: List[Item] = []
    pos = 0

    def parse_command() -> Command:
        nonlocal pos
        assigns: List[Tuple[str, Word]] = []
        words: List[Word] = []
        redirs: List[Redirect] = []
        while pos < len(toks):
            tok = toks[pos]
            if tok in ("|", ";", "&"):
                break
            if tok in ("<", ">", ">>", "2>"):
                op = tok
                pos += 1
                if pos >= len(toks) or not isinstance(toks[pos], Word):
                    raise ShellSyntaxError(f"missing redirection target after {op}")
                target = toks[pos]
                pos += 1
                fd = {"<": 0, ">": 1, ">>": 1, "2>": 2}[op]
                redirs.append(Redirect(fd, ">" if op == "2>" else op, target))
                continue
            assert isinstance(tok, Word)
            if not words:
                first = tok.segs[0]
                if (not first.quoted and "=" in first.text
                        and _ASSIGN_RE.match(first.text.split("=", 1)[0] or "?") and
                        first.text.split("=", 1)[0]):
                    name, rest = first.text.split("=", 1)
                    value = Word((Seg(rest, False),) + tok.segs[1:])
                    assigns.append((name, value))
                    pos += 1
                    continue
            words.append(tok)
            pos += 1
        if not assigns and not words and not redirs:
            raise ShellSyntaxError("empty command")
        return Command(tuple(assigns), tuple(words), tuple(redirs))

    def parse_pipeline() -> Pipeline:
        nonlocal pos
        cmds = [parse_command()]
        while pos < len(toks) and toks[pos] == "|":
            pos += 1
            cmds.append(parse_command())
        return Pipeline(tuple(cmds))

    while pos < len(toks):
        pipeline = parse_pipeline()
        background = False
        if pos < len(toks) and toks[pos] in (";", "&"):
            background = toks[pos] == "&"
            pos += 1
        items.append(Item(pipeline, background))
    return items


def unparse(items: List[Item]) -> str:
    """Canonical text for an AST; parse(unparse(parse(s))) == parse(s)."""

    def word(w: Word) -> str:
        out = []
        for seg in w.segs:
            if seg.quoted:
                out.append("'" + seg.text + "'")
            elif seg.text == "" or any(c in seg.text for c in " \t|;&<>#'\""):
                out.append('"' + seg.text + '"')
            else:
                out.append(seg.text)
        return "".join(out)

    def command(c: Command) -> str:
        parts = [f"{k}={word(v)}" for k, v in c.assigns]
        parts += [word(w) for w in c.words]
        for r in c.redirs:
            op = "2>" if (r.fd == 2 and r.op == ">") else (">>" if r.op == ">>" else ("<" if r.fd == 0 else ">"))
            parts.append(op + " " + word(r.target))
        return " ".join(parts)

    out = []
    for item in items:
        text = " | ".join(command(c) for c in item.pipeline.commands)
        out.append(text + (" &" if item.background else ""))
    return " ; ".join(out)


# -- evaluator -------------------------------------------------------------------

class Shell:
    def __init__(self, ctx: GuestContext):
        self.ctx = ctx
        self.vars: Dict[str, str] = dict(ctx.environ)
        self.last_status = 0
        self.fg_pids: List[int] = []
        self.reaped: Dict[int, int] = {}
        self.interrupted = False
        self._stdin_buf = bytearray()
        self._stdin_eof = False
        ctx.signal(wire.SIGCHLD, self._on_sigchld)
        ctx.signal(wire.SIGINT, self._on_sigint)

    # signals ------------------------------------------------------------------

    def _on_sigchld(self, _sig: int) -> None:
        while True:
            try:
                pid, status = self.ctx.wait4(-1, wire.WNOHANG)
            except GuestOSError:
                return
            if pid == 0:
                return
            self.reaped[pid] = status

    def _on_sigint(self, _sig: int) -> None:
        if self.fg_pids:
            for pid in self.fg_pids:
                try:
                    self.ctx.kill(pid, wire.SIGINT)
                except GuestOSError:
                    pass
        else:
            self.interrupted = True

    # expansion ------------------------------------------------------------------

    def expand_word(self, w: Word) -> str:
        out: List[str] = []
        for seg in w.segs:
            if seg.quoted:
                out.append(seg.text)
            else:
                out.append(_VAR_RE.sub(self._lookup_var, seg.text))
        return "".join(out)

    def _lookup_var(self, m: re.Match) -> str:
        name = m.group(1)
        if name == "?":
            return str(self.last_status)
        return self.vars.get(name, "")

    # command resolution ---------------------------------------------------------

    def resolve(self, name: str) -> Optional[str]:
        if "/" in name:
            return name
        for d in self.vars.get("PATH", "/bin:/usr/bin").split(":"):
            if not d:
                continue
            cand = d.rstrip("/") + "/" + name
            if self.ctx.access(cand, wire.X_OK) == 0:
                return cand
        return None

    # evaluation ------------------------------------------------------------------

    def eval_line(self, line: str) -> int:
        try:
            items = parse_line(line)
        except ShellSyntaxError as e:
            self.ctx.stderr.write_str(f"sh: syntax error: {e}\n")
            self.last_status = 2
            return 2
        for item in items:
            self.run_item(item)
        return self.last_status

    def run_item(self, item: Item) -> None:
        pipeline = item.pipeline
        if (not item.background and len(pipeline.commands) == 1
                and self._try_builtin(pipeline.commands[0])):
            return
        status = self.run_pipeline(pipeline, item.background)
        self.last_status = status

    def _try_builtin(self, cmd: Command) -> bool:
        if cmd.words:
            name = self.expand_word(cmd.words[0])
            if name == "cd":
                target = self.expand_word(cmd.words[1]) if len(cmd.words) > 1 \
                    else self.vars.get("HOME", "/")
                try:
                    self.ctx.chdir(target)
                    self.vars["PWD"] = self.ctx.getcwd()
                    self.last_status = 0
                except GuestOSError as e:
                    self.ctx.stderr.write_str(f"sh: cd: {target}: {strerror(e.errno)}\n")
                    self.last_status = 1
                return True
            if name == "exit":
                code = self.last_status
                if len(cmd.words) > 1:
                    try:
                        code = int(self.expand_word(cmd.words[1])) & 0xFF
                    except ValueError:
                        code = 2
                self.ctx.exit(code)
            return False
        if cmd.assigns and not cmd.words:
            for name, value in cmd.assigns:
                self.vars[name] = self.expand_word(value)
            self.last_status = 0
            return True
        return False

    def run_pipeline(self, pipeline: Pipeline, background: bool) -> int:
        cmds = pipeline.commands
        n = len(cmds)
        pipes: List[Tuple[int, int]] = []
        for _ in range(n - 1):
            pipes.append(self.ctx.pipe2())
        pids: List[Optional[int]] = []
        statuses: List[int] = []
        for i, cmd in enumerate(cmds):
            argv = [self.expand_word(w) for w in cmd.words]
            env = dict(self.vars)
            for name, value in cmd.assigns:
                env[name] = self.expand_word(value)
            if not argv:
                pids.append(None)
                statuses.append(0)
                continue
            grants: Dict[int, int] = {0: 0, 1: 1, 2: 2}
            if i > 0:
                grants[0] = pipes[i - 1][0]
            if i < n - 1:
                grants[1] = pipes[i][1]
            opened: List[int] = []
            redirect_failed = False
            for r in cmd.redirs:
                target = self.expand_word(r.target)
                try:
                    if r.op == "<":
                        fd = self.ctx.open(target, wire.O_RDONLY)
                    elif r.op == ">>":
                        fd = self.ctx.open(target, wire.O_WRONLY | wire.O_CREAT | wire.O_APPEND)
                    else:
                        fd = self.ctx.open(target, wire.O_WRONLY | wire.O_CREAT | wire.O_TRUNC)
                except GuestOSError as e:
                    self.ctx.stderr.write_str(f"sh: {target}: {strerror(e.errno)}\n")
                    redirect_failed = True
                    break
                opened.append(fd)
                grants[r.fd] = fd
            if redirect_failed:
                for fd in opened:
                    self.ctx.close(fd)
                pids.append(None)
                statuses.append(1)
                continue
            path = self.resolve(argv[0])
            if path is None:
                self.ctx.stderr.write_str(f"sh: {argv[0]}: not found\n")
                pids.append(None)
                statuses.append(127)
            else:
                try:
                    pid = self.ctx.spawn(path, argv, env,
                                         grants=sorted(grants.items()))
                    pids.append(pid)
                    statuses.append(-1)
                except GuestOSError as e:
                    code = 127 if e.errno == ENOENT else 126
                    self.ctx.stderr.write_str(f"sh: {argv[0]}: {strerror(e.errno)}\n")
                    pids.append(None)
                    statuses.append(code)
            for fd in opened:
                self.ctx.close(fd)
        # the shell must drop its pipe ends so readers see EOF
        for rfd, wfd in pipes:
            self.ctx.close(rfd)
            self.ctx.close(wfd)
        live = [p for p in pids if p is not None]
        if background:
            return 0
        self.fg_pids = live
        try:
            for i, pid in enumerate(pids):
                if pid is None:
                    continue
                statuses[i] = status_to_shell(self._wait_pid(pid))
        finally:
            self.fg_pids = []
        return statuses[-1] if statuses else 0

    def _wait_pid(self, pid: int) -> int:
        while True:
            if pid in self.reaped:
                return self.reaped.pop(pid)
            try:
                rpid, status = self.ctx.wait4(pid, 0)
            except GuestOSError as e:
                if e.errno == EINTR:
                    continue
                if e.errno == ECHILD:
                    return self.reaped.pop(pid, 0)
                raise
            if rpid == pid:
                return status

    # input ------------------------------------------------------------------

    def read_line(self, interactive: bool) -> Optional[str]:
        """One line from fd 0; None at EOF.  EINTR redraws the prompt."""
        while True:
            nl = self._stdin_buf.find(b"\n")
            if nl >= 0:
                line = bytes(self._stdin_buf[:nl])
                del self._stdin_buf[:nl + 1]
                return line.decode("utf-8", "replace")
            if self._stdin_eof:
                if self._stdin_buf:
                    line = bytes(self._stdin_buf)
                    self._stdin_buf.clear()
                    return line.decode("utf-8", "replace")
                return None
            try:
                data = self.ctx.read(0, 4096, retry_eintr=False)
            except GuestOSError as e:
                if e.errno == EINTR:
                    if self.interrupted:
                        self.interrupted = False
                        if interactive:
                            self.ctx.stderr.write_str("\n")
                            self._prompt()
                    continue
                raise
            if not data:
                self._stdin_eof = True
                continue
            self._stdin_buf += data

    def _prompt(self) -> None:
        try:
            cwd = self.ctx.getcwd()
        except GuestOSError:
            cwd = "?"
        self.ctx.stderr.write_str(f"{cwd}$ ")

    def repl(self, interactive: bool) -> int:
        while True:
            if interactive:
                self._prompt()
            line = self.read_line(interactive)
            if line is None:
                return self.last_status
            if line.strip():
                self.eval_line(line)

    def run_script(self, text: str) -> int:
        for line in text.splitlines():
            if line.strip():
                self.eval_line(line)
        return self.last_status


def sh_main(ctx: GuestContext, argv: List[str]) -> int:
    args = argv[1:]
    interactive = False
    if args and args[0] == "-i":
        interactive = True
        args = args[1:]
    shell = Shell(ctx)
    if args and args[0] == "-c":
        if len(args) < 2:
            ctx.stderr.write_str("sh: -c requires an argument\n")
            return 2
        status = shell.eval_line(args[1])
        ctx.stdout.flush()
        return status
    if args:
        try:
            fd = ctx.open(args[0], wire.O_RDONLY)
        except GuestOSError as e:
            ctx.stderr.write_str(f"sh: {args[0]}: {strerror(e.errno)}\n")
            return 127
        text = ctx.read_all(fd).decode("utf-8", "replace")
        ctx.close(fd)
        status = shell.run_script(text)
        ctx.stdout.flush()
        return status
    status = shell.repl(interactive)
    ctx.stdout.flush()
    return status


register("sh", sh_main)
