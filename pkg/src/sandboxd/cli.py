"""Command line front end.

  sandboxd run [opts] PROG [ARGS...]   run one guest program
  sandboxd sh [opts]                   interactive shell REPL
  sandboxd bench [opts]                getpid latency benchmark
  sandboxd serve-term [opts]           WebSocket terminal service

Exit codes: 64 usage error, 71 boot failure; `run` forwards the guest's
shell-style exit code (127 when the program does not exist).
"""

from __future__ import annotations

import argparse
import sys
import threading
from typing import List, Optional

from . import bench as benchmod
from .errors import FsInitError, status_to_shell
from .kernel import Kernel
from .termservice import TermService
from .userland import install_userland
from .vfs import DirProvider, FsConfig, HttpProvider

EX_USAGE = 64
EX_BOOTFAIL = 71


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        raise _UsageError(message)


def _add_kernel_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--mode", choices=["async", "sync"], default="async",
                   help="syscall convention for spawned guests")
    p.add_argument("--mount", action="append", default=[], metavar="HOSTDIR:/GUESTPATH",
                   help="copy a host tree into the writable layer")
    p.add_argument("--underlay", default=None, metavar="dir:PATH|http://...",
                   help="lazy read-only underlay provider")
    p.add_argument("--pipe-cap", type=int, default=None,
                   help="pipe capacity in bytes (env SANDBOXD_PIPE_CAP)")
    p.add_argument("--cwd", default="/", help="initial working directory")


def _build_kernel(args) -> Kernel:
    fs = None
    if args.underlay:
        try:
            fs = FsConfig.parse_underlay(args.underlay)
        except ValueError as e:
            raise _UsageError(str(e))
    kernel = Kernel(fs=fs, pipe_capacity=args.pipe_cap,
                    default_convention=args.mode)
    try:
        kernel.boot_sync()
    except FsInitError:
        kernel.shutdown()
        raise
    install_userland(kernel)
    for mount in args.mount:
        if ":" not in mount:
            kernel.shutdown()
            raise _UsageError(f"bad --mount (need HOSTDIR:/GUESTPATH): {mount!r}")
        host, guest = mount.split(":", 1)
        kernel.stage_tree(host, guest)
    return kernel


def _feed_host_stdin(proc) -> threading.Thread:
    def pump() -> None:
        try:
            while True:
                data = sys.stdin.buffer.read(65536)
                if not data:
                    break
                if not proc.stdin_write(data):
                    break
        except Exception:
            pass
        proc.stdin_close()

    t = threading.Thread(target=pump, name="stdin-pump", daemon=True)
    t.start()
    return t


def cmd_run(args) -> int:
    kernel = _build_kernel(args)
    try:
        out = sys.stdout.buffer
        errout = sys.stderr.buffer
        try:
            proc = kernel.spawn_process(
                args.prog, [args.prog] + args.args,
                on_stdout=lambda b: (out.write(b), out.flush()),
                on_stderr=lambda b: (errout.write(b), errout.flush()),
                feed_stdin=not sys.stdin.isatty(),
                cwd=args.cwd)
        except OSError as e:
            print(f"sandboxd: {args.prog}: {e.strerror}", file=sys.stderr)
            return 127
        if not sys.stdin.isatty():
            _feed_host_stdin(proc)
        while True:
            try:
                status = proc.wait(timeout=0.2)
            except KeyboardInterrupt:
                try:
                    kernel.kill(proc.pid, 2)
                except OSError:
                    pass
                continue
            if status is not None:
                return status_to_shell(status)
    finally:
        kernel.shutdown()


def cmd_sh(args) -> int:
    kernel = _build_kernel(args)
    try:
        out = sys.stdout.buffer
        errout = sys.stderr.buffer
        proc = kernel.spawn_process(
            "/bin/sh", ["sh", "-i"],
            on_stdout=lambda b: (out.write(b), out.flush()),
            on_stderr=lambda b: (errout.write(b), errout.flush()),
            feed_stdin=True, cwd=args.cwd)
        while True:
            try:
                line = sys.stdin.readline()
            except KeyboardInterrupt:
                try:
                    kernel.kill(proc.pid, 2)
                except OSError:
                    pass
                continue
            if not line:
                proc.stdin_close()
                break
            if not proc.stdin_write(line.encode()):
                break
        status = proc.wait(timeout=10)
        return status_to_shell(status or 0)
    finally:
        kernel.shutdown()


def cmd_bench(args) -> int:
    if args.iters < 1000:
        raise _UsageError("--iters must be >= 1000")
    modes = args.modes.split(",") if args.modes != "all" else None
    results = benchmod.run_bench(args.iters, modes)
    print(benchmod.format_report(results))
    return 0


def cmd_serve_term(args) -> int:
    kernel = _build_kernel(args)
    service = TermService(kernel, host=args.host, port=args.port,
                          audit_path=args.audit_json)
    port = service.start()
    print(f"term service listening on ws://{args.host}:{port}", flush=True)
    try:
        threading.Event().wait()
    except KeyboardInterrupt:
        pass
    finally:
        service.stop()
        kernel.shutdown()
    return 0


def build_parser() -> _Parser:
    parser = _Parser(prog="sandboxd", description=__doc__,
                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run a guest program")
    _add_kernel_flags(p_run)
    p_run.add_argument("prog")
    p_run.add_argument("args", nargs=argparse.REMAINDER)
    p_run.set_defaults(fn=cmd_run)

    p_sh = sub.add_parser("sh", help="interactive shell")
    _add_kernel_flags(p_sh)
    p_sh.set_defaults(fn=cmd_sh)

    p_bench = sub.add_parser("bench", help="getpid latency benchmark")
    p_bench.add_argument("--iters", type=int, default=10000)
    p_bench.add_argument("--modes", default="all",
                         help="comma list of baseline,async,sync (default all)")
    p_bench.set_defaults(fn=cmd_bench)

    p_term = sub.add_parser("serve-term", help="WebSocket terminal service")
    _add_kernel_flags(p_term)
    p_term.add_argument("--host", default="127.0.0.1")
    p_term.add_argument("--port", type=int, default=7760)
    p_term.add_argument("--audit-json", default=None,
                        help="write a task/session audit file on changes")
    p_term.set_defaults(fn=cmd_serve_term)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.fn(args)
    except _UsageError as e:
        print(f"sandboxd: {e}", file=sys.stderr)
        return EX_USAGE
    except FsInitError as e:
        print(f"sandboxd: boot failed: {e}", file=sys.stderr)
        return EX_BOOTFAIL


if __name__ == "__main__":
    sys.exit(main())
