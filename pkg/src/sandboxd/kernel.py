"""The kernel: task table, syscall dispatch, signals, and host-facing APIs.

The kernel is passive and single-threaded: one loop thread owns every piece
of kernel state (tasks, filesystem, pipes, sockets) and executes in response
to guest messages and host events posted onto its queue.  Syscall handlers
either complete a call immediately or park a continuation on a wait queue;
nothing in the loop ever blocks.
"""

from __future__ import annotations

import os
import queue
import threading
import time
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

from . import ipc, vfs as vfsmod, wire, workers
from .errors import (
    EACCES, EAGAIN, EBADF, ECHILD, EINTR, EINVAL, EISDIR,
    EMFILE, ENOENT, ENOEXEC, ENOMEM, ENOSYS, ENOTCONN, ENOTDIR, ERANGE, ESPIPE, ESRCH,
    FsInitError, KernelNotBooted, WorkerGone,
    status_from_exit, status_from_signal, status_to_shell,
)
from .vfs import DirHandle, FdEntry, FileHandle, FsConfig, OverlayFs, join_cwd
from .workers import (
    AttachRegion, GuestEntry, GuestImage, InitMessage, RegionGrant,
    SignalMessage, WorkerHandle,
)

NATIVE_MAGIC = b"\x7fNAT "
MAX_FDS = 256
PIPE_CAP_ENV = "SANDBOXD_PIPE_CAP"

# the two traps whose sync-convention result packs (ret, aux) in one i64
_PAIR_RETURN_TRAPS = frozenset({wire.TRAPS["wait4"], wire.TRAPS["pipe2"]})

_SHUTDOWN = object()


@dataclass
class SocketRef:
    endpoint: ipc.SocketEndpoint

    def release(self) -> None:
        self.endpoint.close()


class Task:
    def __init__(self, pid: int, ppid: int, worker: WorkerHandle, cwd: str,
                 convention: str, name: str):
        self.pid = pid
        self.ppid = ppid
        self.state = "running"
        self.worker = worker
        self.cwd = cwd
        self.fds: Dict[int, FdEntry] = {}
        self.exit_code: Optional[int] = None
        self.killed_by: Optional[int] = None
        self.handlers: Dict[int, int] = {}
        self.convention = convention
        self.name = name
        self.heap_snapshot_support = False
        self.entry: Optional[GuestEntry] = None
        self.argv: List[str] = []
        self.environ: Dict[str, str] = {}
        self.outstanding: Dict[int, "CallCtx"] = {}
        self.sync_call: Optional["CallCtx"] = None
        self.wait_parked: List[Tuple[int, "CallCtx"]] = []
        self.on_exit_hooks: List[Callable[[int, int], None]] = []

    def status_word(self) -> int:
        if self.killed_by is not None:
            return status_from_signal(self.killed_by)
        return status_from_exit(self.exit_code or 0)

    def alloc_fd(self, start: int = 3) -> Optional[int]:
        for fd in range(start, MAX_FDS):
            if fd not in self.fds:
                return fd
        return None


class CallCtx:
    """One in-flight syscall: tracks completion, parking and cancellation."""

    __slots__ = ("kernel", "task", "call_id", "trap", "sync", "out_off",
                 "out_cap", "done", "cancelled", "_unpark")

    def __init__(self, kernel: "Kernel", task: Task, call_id: int, trap: int,
                 sync: bool, out_off: int = -1, out_cap: int = 0):
        self.kernel = kernel
        self.task = task
        self.call_id = call_id
        self.trap = trap
        self.sync = sync
        self.out_off = out_off
        self.out_cap = out_cap
        self.done = False
        self.cancelled = False
        self._unpark: Optional[Callable[[], None]] = None

    @property
    def interruptible(self) -> bool:
        return self.trap in wire.INTERRUPTIBLE_TRAPS

    @property
    def parked(self) -> bool:
        return self._unpark is not None

    def park(self, unpark: Callable[[], None]) -> None:
        self._unpark = unpark

    def _finish(self) -> None:
        self.done = True
        self._unpark = None
        self.task.outstanding.pop(self.call_id, None)
        if self.task.sync_call is self:
            self.task.sync_call = None

    def complete(self, ret: int, aux: int = 0, err: int = 0,
                 payload: Optional[bytes] = None) -> None:
        if self.done or self.cancelled:
            return
        self._finish()
        self.kernel.audit_replied += 1
        if self.sync:
            region = self.task.worker.shared
            if payload is not None and self.out_off >= 0:
                data = payload[: self.out_cap]
                region.write(self.out_off, data)
            value = ret if err == 0 else -1
            if err == 0 and self.trap in _PAIR_RETURN_TRAPS:
                value = (ret & 0xFFFFFFFF) | (aux << 32)
            wire.sync_complete(region, value, err)
        else:
            reply = wire.SyscallReply(
                id=self.call_id,
                ret=ret if err == 0 else -1,
                aux=aux,
                errno=err,
                payload=payload,
            )
            try:
                workers.send_to_guest(self.task.worker, reply.encode())
            except WorkerGone:
                pass

    def fail(self, err: int) -> None:
        self.complete(-1, err=err)

    def cancel_for_signal(self) -> None:
        """Interrupt a parked call because a handled signal arrived."""
        if self.done or not self.parked:
            return
        unpark = self._unpark
        if self.sync:
            # the guest synthesizes EINTR itself after running handlers;
            # the retval slot must stay untouched
            self.cancelled = True
            self._finish()
            self.kernel.audit_replied += 1
            unpark()
        else:
            self._unpark = None
            unpark()
            self.fail(EINTR)

    def discard(self) -> None:
        """Drop a call because its task is being torn down."""
        if self.done:
            return
        self.cancelled = True
        unpark = self._unpark
        self._finish()
        self.kernel.audit_discarded += 1
        if unpark is not None:
            unpark()


class ProcessHandle:
    """Host-side handle returned by Kernel.spawn_process."""

    def __init__(self, kernel: "Kernel", pid: int,
                 stdin_pipe: Optional[ipc.Pipe]):
        self.kernel = kernel
        self.pid = pid
        self._stdin = stdin_pipe
        self._status: Optional[int] = None
        self._exited = threading.Event()

    def _on_exit(self, pid: int, status: int) -> None:
        self._status = status
        self._exited.set()

    def wait(self, timeout: Optional[float] = None) -> Optional[int]:
        """Block until exit; returns the status word (None on timeout)."""
        if not self._exited.wait(timeout):
            return None
        return self._status

    @property
    def status(self) -> Optional[int]:
        return self._status

    def stdin_write(self, data: bytes) -> bool:
        """Blocking backpressured write into the guest's fd 0."""
        if self._stdin is None:
            raise ValueError("process has no host-fed stdin")
        done = threading.Event()
        result: List[int] = []

        def deliver(err: int, _val: object) -> None:
            result.append(err)
            done.set()

        self.kernel.post(lambda: self._stdin.write(data, deliver))
        done.wait()
        return result[0] == 0

    def stdin_close(self) -> None:
        if self._stdin is None:
            return
        pipe = self._stdin
        self._stdin = None
        self.kernel.post(pipe.release_writer)

    def kill(self, sig: int) -> None:
        self.kernel.kill(self.pid, sig)


class Kernel:
    """A sandboxd instance.  Host methods are thread-safe; they post events
    into the kernel loop."""

    def __init__(self, fs: Optional[FsConfig] = None,
                 pipe_capacity: Optional[int] = None,
                 default_convention: str = "async",
                 programs: Optional[Dict[str, object]] = None,
                 shell_path: str = "/bin/sh"):
        if pipe_capacity is None:
            pipe_capacity = int(os.environ.get(PIPE_CAP_ENV, ipc.DEFAULT_PIPE_CAPACITY))
        self.pipe_capacity = pipe_capacity
        self.default_convention = default_convention
        self.shell_path = shell_path
        self._queue: "queue.SimpleQueue[object]" = queue.SimpleQueue()
        self._thread: Optional[threading.Thread] = None
        self._booted = threading.Event()
        self._boot_error: Optional[Exception] = None
        self._stopped = False
        self.vfs = OverlayFs(fs, self.post)
        self.sockets = ipc.SocketTable(pipe_capacity, on_listen=self._fire_listen)
        self.tasks: Dict[int, Task] = {}
        self._task_by_worker: Dict[int, Task] = {}
        self._next_pid = 1
        self._listen_watchers: List[Tuple[int, Callable[[], None]]] = []
        if programs is None:
            from . import userland
            programs = dict(userland.REGISTRY)
        self.programs = programs
        self.audit_issued = 0
        self.audit_replied = 0
        self.audit_discarded = 0
        self.event_log: deque = deque(maxlen=100000)
        self.record_events = False
        self.all_pipes: List[ipc.Pipe] = []

    # -- loop & lifecycle ------------------------------------------------------

    def boot(self, ready: Callable[[Optional[Exception]], None]) -> "Kernel":
        self._thread = threading.Thread(target=self._loop, name="kernel-loop", daemon=True)
        self._thread.start()

        def init() -> None:
            def fs_done(err: Optional[Exception]) -> None:
                self._boot_error = err
                self._booted.set()
                ready(err)

            self.vfs.initialize(fs_done)

        self.post(init)
        return self

    def boot_sync(self, timeout: float = 60.0) -> "Kernel":
        self.boot(lambda err: None)
        if not self._booted.wait(timeout):
            raise FsInitError("filesystem initialization timed out")
        if self._boot_error is not None:
            raise self._boot_error
        return self

    def _loop(self) -> None:
        while True:
            item = self._queue.get()
            if item is _SHUTDOWN:
                return
            if self.record_events:
                self.event_log.append(self._describe_event(item))
            try:
                if callable(item):
                    item()
                else:
                    handle, msg = item
                    self._on_worker_message(handle, msg)
            except Exception:
                import traceback
                traceback.print_exc()

    def _describe_event(self, item: object) -> Tuple[float, str]:
        if callable(item):
            return (time.monotonic(), "host-event")
        return (time.monotonic(), "worker-msg")

    def post(self, fn: Callable[[], None]) -> None:
        self._queue.put(fn)

    def _post_worker_msg(self, handle: WorkerHandle, msg: object) -> None:
        self._queue.put((handle, msg))

    def assert_loop_thread(self) -> None:
        assert threading.current_thread() is self._thread, \
            "kernel state touched off the kernel loop"

    def run_in_loop(self, fn: Callable[[], object], timeout: float = 30.0) -> object:
        """Host helper: run fn on the loop thread, return its result."""
        if threading.current_thread() is self._thread:
            return fn()
        done = threading.Event()
        box: List[object] = []

        def wrapper() -> None:
            try:
                box.append(fn())
            except Exception as e:  # propagate to the caller
                box.append(e)
                box.append(True)
            done.set()

        self.post(wrapper)
        if not done.wait(timeout):
            raise TimeoutError("kernel loop did not respond")
        if len(box) == 2:
            raise box[0]
        return box[0]

    def shutdown(self) -> None:
        if self._stopped:
            return
        self._stopped = True

        def stop() -> None:
            for task in list(self.tasks.values()):
                if task.state == "running":
                    self._terminate_task(task, killed_by=wire.SIGKILL)

        try:
            self.run_in_loop(stop, timeout=10)
        except TimeoutError:
            pass
        self._queue.put(_SHUTDOWN)
        if self._thread is not None:
            self._thread.join(timeout=5)
        self.vfs.shutdown()

    def __enter__(self) -> "Kernel":
        return self

    def __exit__(self, *exc) -> None:
        self.shutdown()

    # -- staging (host) -------------------------------------------------------

    def require_booted(self) -> None:
        if not self._booted.is_set() or self._boot_error is not None:
            raise KernelNotBooted("kernel has not finished booting")

    def stage_file(self, path: str, data: bytes, mode: int = 0o644) -> None:
        self.run_in_loop(lambda: self.vfs.install_file(path, data, mode))

    def stage_dir(self, path: str) -> None:
        self.run_in_loop(lambda: self.vfs.install_dir(path))

    def stage_tree(self, host_dir: str, guest_path: str) -> None:
        """Copy a host directory tree into the upper layer."""
        entries: List[Tuple[str, bytes, int]] = []
        dirs: List[str] = [guest_path]
        for dirpath, dirnames, filenames in os.walk(host_dir):
            rel = os.path.relpath(dirpath, host_dir)
            base = guest_path if rel == "." else vfsmod.normalize(
                guest_path.rstrip("/") + "/" + rel.replace(os.sep, "/"))
            dirs.append(base)
            for fn in filenames:
                full = os.path.join(dirpath, fn)
                with open(full, "rb") as f:
                    data = f.read()
                mode = 0o755 if os.access(full, os.X_OK) else 0o644
                entries.append((vfsmod.normalize(base + "/" + fn), data, mode))

        def install() -> None:
            for d in dirs:
                self.vfs.install_dir(d)
            for path, data, mode in entries:
                self.vfs.install_file(path, data, mode)

        self.run_in_loop(install)

    def read_file(self, path: str, timeout: float = 30.0) -> bytes:
        """Host read of a VFS file (fetches lazily if needed)."""
        done = threading.Event()
        box: List[object] = []

        def go() -> None:
            def cb(err: int, data: object) -> None:
                box.append((err, data))
                done.set()

            self.vfs.read_file(path, cb)

        self.post(go)
        if not done.wait(timeout):
            raise TimeoutError("read_file timed out")
        err, data = box[0]
        if err:
            raise OSError(err, os.strerror(err), path)
        return data

    # -- host process APIs ------------------------------------------------------

    def system(self, cmdline: str,
               on_exit: Callable[[int, int], None],
               on_stdout: Callable[[bytes], None],
               on_stderr: Callable[[bytes], None]) -> None:
        """Run `sh -c cmdline`, streaming output to the sinks; on_exit gets
        (pid, shell-style exit code)."""
        self.require_booted()
        argv = [self.shell_path, "-c", cmdline]

        def exit_hook(pid: int, status: int) -> None:
            on_exit(pid, status_to_shell(status))

        def fail(err: int) -> None:
            on_exit(-1, 127)

        self.post(lambda: self._host_spawn(
            self.shell_path, argv, None, on_stdout, on_stderr,
            feed_stdin=False, convention=None, exit_cb=exit_hook,
            fail_cb=fail, handle=None))

    def spawn_process(self, path: str, argv: Optional[List[str]] = None,
                      env: Optional[Dict[str, str]] = None,
                      on_stdout: Optional[Callable[[bytes], None]] = None,
                      on_stderr: Optional[Callable[[bytes], None]] = None,
                      feed_stdin: bool = True,
                      convention: Optional[str] = None,
                      cwd: str = "/") -> ProcessHandle:
        """Spawn a guest with host-wired stdio; blocks until launched."""
        self.require_booted()
        argv = argv if argv is not None else [path]
        box: List[object] = []
        launched = threading.Event()

        pending = ProcessHandle(self, -1, None)

        def exit_cb(pid: int, status: int) -> None:
            pending._on_exit(pid, status)

        def fail_cb(err: int) -> None:
            box.append(err)
            launched.set()

        def ok_cb(pid: int, stdin_pipe: Optional[ipc.Pipe]) -> None:
            pending.pid = pid
            pending._stdin = stdin_pipe
            launched.set()

        self.post(lambda: self._host_spawn(
            path, argv, env,
            on_stdout or (lambda b: None),
            on_stderr or (lambda b: None),
            feed_stdin=feed_stdin, convention=convention,
            exit_cb=exit_cb, fail_cb=fail_cb, handle=ok_cb, cwd=cwd))
        launched.wait()
        if box:
            raise OSError(box[0], os.strerror(box[0]), path)
        return pending

    def _host_spawn(self, path: str, argv: List[str],
                    env: Optional[Dict[str, str]],
                    on_stdout: Callable[[bytes], None],
                    on_stderr: Callable[[bytes], None],
                    feed_stdin: bool, convention: Optional[str],
                    exit_cb: Callable[[int, int], None],
                    fail_cb: Callable[[int], None],
                    handle: Optional[Callable[[int, Optional[ipc.Pipe]], None]],
                    cwd: str = "/") -> None:
        """Kernel-loop path shared by system() and spawn_process()."""
        stdin_pipe = self._new_pipe()
        stdout_pipe = self._new_pipe()
        stderr_pipe = self._new_pipe()
        # child reads fd 0, writes 1/2; the kernel holds the far ends
        for p in (stdin_pipe, stdout_pipe, stderr_pipe):
            p.add_reader()
            p.add_writer()
        fd_plan = {
            0: FdEntry(obj=ipc.PipeEnd(stdin_pipe, readable=True),
                       flags=wire.O_RDONLY, refcount=0),
            1: FdEntry(obj=ipc.PipeEnd(stdout_pipe, readable=False),
                       flags=wire.O_WRONLY, refcount=0),
            2: FdEntry(obj=ipc.PipeEnd(stderr_pipe, readable=False),
                       flags=wire.O_WRONLY, refcount=0),
        }
        env = dict(env) if env else {"PATH": "/bin:/usr/bin"}

        def on_spawned(err: int, pid: int) -> None:
            if err:
                # unwind the kernel-held ends and the child plan
                for p in (stdin_pipe, stdout_pipe, stderr_pipe):
                    p.release_reader()
                    p.release_writer()
                fail_cb(err)
                return
            self._drain_pipe(stdout_pipe, on_stdout)
            self._drain_pipe(stderr_pipe, on_stderr)
            if not feed_stdin:
                stdin_pipe.release_writer()
            task = self.tasks[pid]
            task.on_exit_hooks.append(exit_cb)
            if handle is not None:
                handle(pid, stdin_pipe if feed_stdin else None)

        self._spawn_common(
            parent=None, path=path, argv=argv, environ=env,
            fd_plan=fd_plan, cwd=cwd,
            convention=convention or self.default_convention,
            done=on_spawned)

    def _drain_pipe(self, pipe: ipc.Pipe, sink: Callable[[bytes], None]) -> None:
        """Kernel-held reader pumping a pipe into a host sink until EOF."""

        def deliver(err: int, data: object) -> None:
            if err or not data:
                pipe.release_reader()
                return
            try:
                sink(data)
            except Exception:
                pass
            pipe.read(65536, deliver)

        pipe.read(65536, deliver)

    def kill(self, pid: int, sig: int) -> None:
        """Host-facing kill; ESRCH is reported via OSError on the caller."""
        err = self.run_in_loop(lambda: self._do_kill(pid, sig))
        if err:
            raise OSError(err, os.strerror(err))

    def kill_tree(self, pid: int, sig: int) -> None:
        """Signal pid and every descendant (the session teardown path)."""

        def go() -> None:
            victims = []
            frontier = [pid]
            seen = set()
            while frontier:
                p = frontier.pop()
                if p in seen:
                    continue
                seen.add(p)
                victims.append(p)
                frontier += [t.pid for t in self.tasks.values() if t.ppid == p]
            for p in victims:
                self._do_kill(p, sig)

        self.run_in_loop(go)

    def notify_on_listen(self, port: int, cb: Callable[[], None]) -> None:
        """Invoke cb exactly once when some socket listens on port (now, if
        one already does).  cb runs on the kernel loop thread."""

        def check() -> None:
            ep = self.sockets.ports.get(port)
            if ep is not None and ep.state == ipc.S_LISTENING:
                cb()
            else:
                self._listen_watchers.append((port, cb))

        self.post(check)

    def _fire_listen(self, port: int) -> None:
        remaining = []
        for wport, cb in self._listen_watchers:
            if wport == port:
                try:
                    cb()
                except Exception:
                    pass
            else:
                remaining.append((wport, cb))
        self._listen_watchers = remaining

    # -- audit (host) ------------------------------------------------------------

    def task_snapshot(self) -> List[Dict[str, object]]:
        def snap() -> List[Dict[str, object]]:
            return [
                {
                    "pid": t.pid, "ppid": t.ppid, "state": t.state,
                    "name": t.name, "cwd": t.cwd, "fds": sorted(t.fds),
                    "convention": t.convention,
                    "exit_code": t.exit_code, "killed_by": t.killed_by,
                }
                for t in self.tasks.values()
            ]

        return self.run_in_loop(snap)

    def correlation_report(self) -> Dict[str, int]:
        def snap() -> Dict[str, int]:
            live = sum(len(t.outstanding) for t in self.tasks.values())
            return {
                "issued": self.audit_issued,
                "replied": self.audit_replied,
                "discarded": self.audit_discarded,
                "outstanding": live,
            }

        return self.run_in_loop(snap)

    # -- pipes -----------------------------------------------------------------

    def _new_pipe(self) -> ipc.Pipe:
        p = ipc.Pipe(self.pipe_capacity)
        self.all_pipes.append(p)
        return p

    # -- worker message handling ---------------------------------------------------

    def _on_worker_message(self, handle: WorkerHandle, msg: object) -> None:
        if handle.terminated:
            return
        task = self._task_by_worker.get(handle.worker_id)
        if task is None or task.state != "running":
            return
        if isinstance(msg, AttachRegion):
            self._attach_region(task, msg)
            return
        if isinstance(msg, (bytes, bytearray)):
            try:
                env = wire.SyscallEnvelope.decode(bytes(msg))
            except Exception:
                return
            self._dispatch(task, env)

    def _attach_region(self, task: Task, req: AttachRegion) -> None:
        try:
            region = workers.attach_shared_region(
                task.worker, req.size, req.retval_off, req.wake_off)
        except Exception:
            try:
                workers.send_to_guest(task.worker, RegionGrant(None, EINVAL))
            except WorkerGone:
                pass
            return
        task.convention = "sync"
        try:
            workers.send_to_guest(task.worker, RegionGrant(region, 0))
        except WorkerGone:
            pass

    # -- dispatch ---------------------------------------------------------------

    def _dispatch(self, task: Task, env: wire.SyscallEnvelope) -> None:
        self.audit_issued += 1
        sync = task.convention == "sync" and task.worker.shared is not None
        ctx = CallCtx(self, task, env.id, env.trap, sync)
        name = wire.TRAP_NAMES.get(env.trap)
        if name is None:
            ctx.fail(ENOSYS)
            return
        task.outstanding[env.id] = ctx
        if sync:
            if task.sync_call is not None:
                ctx.fail(EINVAL)  # protocol violation: >1 outstanding sync call
                return
            task.sync_call = ctx
        try:
            if sync:
                args = self._decode_sync(task, ctx, name, env.args)
            else:
                args = self._decode_async(ctx, name, env.args)
        except Exception:
            ctx.fail(EINVAL)
            return
        handler = getattr(self, f"_sys_{name}")
        try:
            handler(task, ctx, *args)
        except Exception:
            import traceback
            traceback.print_exc()
            ctx.fail(EINVAL)

    # decoders ------------------------------------------------------------------

    def _decode_async(self, ctx: CallCtx, name: str, a: List[object]) -> Tuple:
        if name == "spawn":
            path = a[0]
            argc = a[1]
            argv = list(a[2:2 + argc])
            envc = a[2 + argc]
            env_list = list(a[3 + argc:3 + argc + envc])
            grants_flat = a[3 + argc + envc] if len(a) > 3 + argc + envc else []
            env = dict(kv.split("=", 1) for kv in env_list)
            grants = list(zip(grants_flat[0::2], grants_flat[1::2]))
            return (path, argv, env, grants)
        if name == "utimes":
            return (a[0], a[1], a[2])  # path, atime_ns, mtime_ns
        return tuple(a)

    def _decode_sync(self, task: Task, ctx: CallCtx, name: str,
                     a: List[object]) -> Tuple:
        region = task.worker.shared
        ints = [int(x) for x in a]
        while len(ints) < 6:
            ints.append(0)

        def s(off: int, length: int) -> str:
            return region.read(off, length).decode("utf-8")

        if name in ("exit", "close", "llseek", "kill", "signal_register",
                    "wait4", "bind", "listen", "accept", "connect",
                    "getsockname", "socket", "pipe2", "getpid", "getppid"):
            argn = {
                "exit": 1, "close": 1, "llseek": 3, "kill": 2,
                "signal_register": 2, "wait4": 2, "bind": 2, "listen": 2,
                "accept": 1, "connect": 2, "getsockname": 1, "socket": 0,
                "pipe2": 0, "getpid": 0, "getppid": 0,
            }[name]
            return tuple(ints[:argn])
        if name == "getcwd":
            ctx.out_off, ctx.out_cap = ints[0], ints[1]
            return (ints[1],)
        if name in ("chdir", "rmdir", "unlink"):
            return (s(ints[0], ints[1]),)
        if name == "open":
            return (s(ints[0], ints[1]), ints[2], ints[3])
        if name == "mkdir":
            return (s(ints[0], ints[1]), ints[2])
        if name == "access":
            return (s(ints[0], ints[1]), ints[2])
        if name == "readlink":
            ctx.out_off, ctx.out_cap = ints[2], ints[3]
            return (s(ints[0], ints[1]),)
        if name == "utimes":
            return (s(ints[0], ints[1]), ints[2], ints[3])
        if name in ("stat", "lstat"):
            ctx.out_off, ctx.out_cap = ints[2], wire.STAT_RECORD_LEN
            return (s(ints[0], ints[1]),)
        if name == "fstat":
            ctx.out_off, ctx.out_cap = ints[1], wire.STAT_RECORD_LEN
            return (ints[0],)
        if name == "read":
            ctx.out_off, ctx.out_cap = ints[1], ints[2]
            return (ints[0], ints[2])
        if name == "pread":
            ctx.out_off, ctx.out_cap = ints[1], ints[2]
            return (ints[0], ints[2], ints[3])
        if name == "write":
            return (ints[0], region.read(ints[1], ints[2]))
        if name == "pwrite":
            return (ints[0], region.read(ints[1], ints[2]), ints[3])
        if name == "getdents":
            ctx.out_off, ctx.out_cap = ints[1], ints[2]
            return (ints[0], ints[2])
        if name == "readdir":
            ctx.out_off, ctx.out_cap = ints[2], ints[3]
            return (s(ints[0], ints[1]), ints[3])
        if name == "spawn":
            argv_all = wire.unpack_str_block(region.read(ints[0], ints[1]))
            env_list = wire.unpack_str_block(region.read(ints[2], ints[3]))
            grants = wire.unpack_pair_block(region.read(ints[4], ints[5]))
            env = dict(kv.split("=", 1) for kv in env_list)
            return (argv_all[0], argv_all[1:], env, grants)
        if name == "fork":
            return (b"", 0)  # rejected in the handler for sync tasks
        raise ValueError(f"no sync decoding for {name}")

    # -- process syscalls -----------------------------------------------------------

    def _sys_getpid(self, t: Task, c: CallCtx) -> None:
        c.complete(t.pid)

    def _sys_getppid(self, t: Task, c: CallCtx) -> None:
        c.complete(t.ppid)

    def _sys_getcwd(self, t: Task, c: CallCtx, cap: int = 1 << 20) -> None:
        raw = t.cwd.encode("utf-8")
        if len(raw) > cap:
            c.fail(ERANGE)
            return
        c.complete(len(raw), payload=raw)

    def _sys_chdir(self, t: Task, c: CallCtx, path: str) -> None:
        full = join_cwd(t.cwd, path)
        err, node = self.vfs.lookup(full)
        if err:
            c.fail(err)
            return
        if node.kind != "dir":
            c.fail(ENOTDIR)
            return
        t.cwd = full
        c.complete(0)

    def _sys_exit(self, t: Task, c: CallCtx, code: int) -> None:
        # exit never replies: the guest runtime halts after sending it
        c.done = True
        t.outstanding.pop(c.call_id, None)
        if t.sync_call is c:
            t.sync_call = None
        self.audit_replied += 1
        self._terminate_task(t, exit_code=int(code) & 0xFF)

    def _sys_signal_register(self, t: Task, c: CallCtx, sig: int, disp: int) -> None:
        if sig == wire.SIGKILL or sig not in wire.SIGNAL_NUMBERS:
            c.fail(EINVAL)
            return
        if disp not in (wire.DISP_DEFAULT, wire.DISP_IGNORE, wire.DISP_HANDLED):
            c.fail(EINVAL)
            return
        t.handlers[sig] = disp
        c.complete(0)

    def _sys_kill(self, t: Task, c: CallCtx, pid: int, sig: int) -> None:
        err = self._do_kill(pid, sig)
        if err:
            c.fail(err)
        else:
            c.complete(0)

    def _do_kill(self, pid: int, sig: int) -> int:
        target = self.tasks.get(pid)
        if target is None or target.state != "running":
            return ESRCH
        if sig not in wire.SIGNAL_NUMBERS:
            return EINVAL
        self._deliver_signal(target, sig)
        return 0

    def _deliver_signal(self, target: Task, sig: int) -> None:
        if sig == wire.SIGKILL:
            self._terminate_task(target, killed_by=sig)
            return
        disp = target.handlers.get(sig, wire.DISP_DEFAULT)
        if disp == wire.DISP_IGNORE:
            return
        if disp == wire.DISP_DEFAULT:
            if sig in (wire.SIGTERM, wire.SIGINT):
                self._terminate_task(target, killed_by=sig)
            return
        # handled: deliver the signal message first so the guest runs the
        # handler before it sees any EINTR completion
        try:
            workers.send_to_guest(target.worker, SignalMessage(sig))
        except WorkerGone:
            return
        if target.convention == "sync":
            call = target.sync_call
            if call is not None and call.parked and call.interruptible:
                call.cancel_for_signal()
                wire.sync_signal(target.worker.shared)
        else:
            for call in list(target.outstanding.values()):
                if call.parked and call.interruptible:
                    call.cancel_for_signal()

    def _sys_spawn(self, t: Task, c: CallCtx, path: str, argv: List[str],
                   env: Dict[str, str], grants: List[Tuple[int, int]]) -> None:
        full = join_cwd(t.cwd, path)
        fd_plan: Dict[int, FdEntry] = {}
        for child_fd, parent_fd in grants:
            ent = t.fds.get(parent_fd)
            if ent is None:
                c.fail(EBADF)
                return
            fd_plan[child_fd] = ent

        def done(err: int, pid: int) -> None:
            if c.cancelled:
                return
            if err:
                c.fail(err)
            else:
                c.complete(pid)

        self._spawn_common(parent=t, path=full, argv=argv, environ=env,
                           fd_plan=fd_plan, cwd=t.cwd,
                           convention=t.convention, done=done)

    def _spawn_common(self, parent: Optional[Task], path: str,
                      argv: List[str], environ: Dict[str, str],
                      fd_plan: Dict[int, FdEntry], cwd: str, convention: str,
                      done: Callable[[int, int], None]) -> None:
        """Resolve an executable (following one shebang level), build the
        task and launch its worker."""
        err, node = self.vfs.lookup(path)
        if err:
            done(err, -1)
            return
        if node.kind == "dir":
            done(EACCES, -1)
            return
        if not node.mode & 0o111:
            done(EACCES, -1)
            return

        def have_exec(err2: int, data: object) -> None:
            if err2:
                done(err2, -1)
                return
            data = bytes(data)
            if data.startswith(b"#!"):
                line = data.split(b"\n", 1)[0][2:].decode("utf-8", "replace").strip()
                if not line:
                    done(ENOEXEC, -1)
                    return
                parts = line.split(None, 1)
                interp = parts[0]
                iarg = parts[1] if len(parts) > 1 else None
                new_argv = [interp] + ([iarg] if iarg else []) + [path] + list(argv[1:])
                ierr, inode = self.vfs.lookup(interp)
                if ierr:
                    done(ENOENT, -1)
                    return
                if inode.kind != "file" or not inode.mode & 0o111:
                    done(EACCES, -1)
                    return

                def have_interp(err3: int, idata: object) -> None:
                    if err3:
                        done(err3, -1)
                        return
                    idata = bytes(idata)
                    prog = self._native_name(idata)
                    if prog is None:
                        done(ENOEXEC, -1)
                        return
                    entry = GuestEntry(kind="interpreter", program=prog, script=path)
                    self._launch_task(parent, entry, idata, new_argv, environ,
                                      fd_plan, cwd, convention, None, done)

                self.vfs.read_file(interp, have_interp)
                return
            prog = self._native_name(data)
            if prog is None:
                done(ENOEXEC, -1)
                return
            entry = GuestEntry(kind="registered", program=prog)
            self._launch_task(parent, entry, data, list(argv), environ,
                              fd_plan, cwd, convention, None, done)

        self.vfs.read_file(path, have_exec)

    def _native_name(self, data: bytes) -> Optional[str]:
        if not data.startswith(NATIVE_MAGIC):
            return None
        name = data[len(NATIVE_MAGIC):].split(b"\n", 1)[0].decode("utf-8", "replace").strip()
        return name if name in self.programs else None

    def _alloc_pid(self) -> int:
        for _ in range(1 << 20):
            pid = self._next_pid
            self._next_pid = self._next_pid + 1 if self._next_pid < 0xFFFFFFFF else 1
            if pid not in self.tasks:
                return pid
        raise RuntimeError("pid space exhausted")

    def _launch_task(self, parent: Optional[Task], entry: GuestEntry,
                     payload: bytes, argv: List[str], environ: Dict[str, str],
                     fd_plan: Dict[int, FdEntry], cwd: str, convention: str,
                     fork_snapshot: Optional[Tuple[bytes, int]],
                     done: Callable[[int, int], None]) -> None:
        from . import guest

        program = self.programs[entry.program]
        image = GuestImage(
            payload=payload, entry=entry, argv=list(argv),
            environ=dict(environ), fork_snapshot=fork_snapshot,
            convention=convention,
            snapshotable=getattr(program, "snapshotable", False),
            program=program,
        )
        try:
            worker = workers.launch_worker(
                image, self._post_worker_msg, guest.bootstrap, name=entry.program)
        except Exception:
            done(EAGAIN, -1)
            return
        pid = self._alloc_pid()
        task = Task(pid=pid, ppid=parent.pid if parent else 0, worker=worker,
                    cwd=cwd, convention=convention, name=entry.program)
        task.entry = entry
        task.argv = list(argv)
        task.environ = dict(environ)
        task.heap_snapshot_support = image.snapshotable
        for fd, ent in fd_plan.items():
            ent.refcount += 1
            task.fds[fd] = ent
        self.tasks[pid] = task
        self._task_by_worker[worker.worker_id] = task
        workers.send_to_guest(worker, InitMessage(
            argv=list(argv), environ=dict(environ), fork_snapshot=fork_snapshot))
        done(0, pid)

    def _sys_fork(self, t: Task, c: CallCtx, snap_bytes: bytes,
                  resume_pc: int) -> None:
        if t.convention == "sync":
            c.fail(ENOSYS)
            return
        if not t.heap_snapshot_support:
            c.fail(ENOSYS)
            return

        def done(err: int, pid: int) -> None:
            if c.cancelled:
                return
            if err:
                c.fail(err)
            else:
                c.complete(pid)

        try:
            snap_copy = bytes(snap_bytes)
        except MemoryError:
            c.fail(ENOMEM)
            return
        self._launch_task(
            parent=t, entry=t.entry, payload=b"", argv=t.argv,
            environ=t.environ, fd_plan=dict(t.fds), cwd=t.cwd,
            convention="async", fork_snapshot=(snap_copy, resume_pc), done=done)

    def _sys_wait4(self, t: Task, c: CallCtx, pid: int, options: int) -> None:
        matching = [x for x in self.tasks.values()
                    if x.ppid == t.pid and (pid == -1 or x.pid == pid)]
        if not matching:
            c.fail(ECHILD)
            return
        zombies = [x for x in matching if x.state == "zombie"]
        if zombies:
            z = zombies[0]
            status = z.status_word()
            del self.tasks[z.pid]
            c.complete(z.pid, aux=status)
            return
        if options & wire.WNOHANG:
            c.complete(0, aux=0)
            return
        rec = (pid, c)
        t.wait_parked.append(rec)
        c.park(lambda: t.wait_parked.remove(rec) if rec in t.wait_parked else None)

    # fork/exit plumbing -----------------------------------------------------------

    def _terminate_task(self, task: Task, exit_code: Optional[int] = None,
                        killed_by: Optional[int] = None) -> None:
        if task.state != "running":
            return
        task.state = "zombie"
        task.exit_code = exit_code
        task.killed_by = killed_by
        for call in list(task.outstanding.values()):
            call.discard()
        task.wait_parked.clear()
        for fd in sorted(task.fds):
            self._release_fd(task, fd)
        workers.terminate_worker(task.worker)
        self._task_by_worker.pop(task.worker.worker_id, None)
        status = task.status_word()
        for hook in task.on_exit_hooks:
            try:
                hook(task.pid, status)
            except Exception:
                pass
        task.on_exit_hooks.clear()
        # reparent this task's children: orphans auto-reap on exit
        for child in list(self.tasks.values()):
            if child.ppid == task.pid:
                child.ppid = 0
                if child.state == "zombie":
                    self.tasks.pop(child.pid, None)
        parent = self.tasks.get(task.ppid) if task.ppid else None
        if parent is None or parent.state != "running":
            # no one will ever wait on this task
            self.tasks.pop(task.pid, None)
            return
        self._deliver_signal(parent, wire.SIGCHLD)
        for i, (pfilter, ctx) in enumerate(parent.wait_parked):
            if ctx.done or ctx.cancelled:
                continue
            if pfilter == -1 or pfilter == task.pid:
                parent.wait_parked.pop(i)
                self.tasks.pop(task.pid, None)
                ctx._unpark = None
                ctx.complete(task.pid, aux=status)
                return

    # -- file syscalls ---------------------------------------------------------------

    def _sys_open(self, t: Task, c: CallCtx, path: str, flags: int, mode: int) -> None:
        full = join_cwd(t.cwd, path)

        def done(err: int, handle: object) -> None:
            if c.cancelled:
                return
            if err:
                c.fail(err)
                return
            fd = t.alloc_fd()
            if fd is None:
                c.fail(EMFILE)
                return
            t.fds[fd] = FdEntry(obj=handle, flags=flags)
            c.complete(fd)

        self.vfs.open(full, flags, mode, done)

    def _sys_close(self, t: Task, c: CallCtx, fd: int) -> None:
        if fd not in t.fds:
            c.fail(EBADF)
            return
        self._release_fd(t, fd)
        c.complete(0)

    def _release_fd(self, t: Task, fd: int) -> None:
        ent = t.fds.pop(fd, None)
        if ent is None:
            return
        ent.refcount -= 1
        if ent.refcount == 0:
            obj = ent.obj
            if isinstance(obj, (ipc.PipeEnd, SocketRef)):
                obj.release()

    def _fd_readable(self, ent: FdEntry) -> bool:
        return (ent.flags & wire.O_ACCMODE) in (wire.O_RDONLY, wire.O_RDWR)

    def _fd_writable(self, ent: FdEntry) -> bool:
        return (ent.flags & wire.O_ACCMODE) in (wire.O_WRONLY, wire.O_RDWR)

    def _sys_read(self, t: Task, c: CallCtx, fd: int, n: int) -> None:
        self._do_read(t, c, fd, n, offset=None)

    def _sys_pread(self, t: Task, c: CallCtx, fd: int, n: int, offset: int) -> None:
        self._do_read(t, c, fd, n, offset=offset)

    def _do_read(self, t: Task, c: CallCtx, fd: int, n: int,
                 offset: Optional[int]) -> None:
        ent = t.fds.get(fd)
        if ent is None or not self._fd_readable(ent):
            c.fail(EBADF)
            return
        if n < 0:
            c.fail(EINVAL)
            return
        obj = ent.obj
        if isinstance(obj, FileHandle):
            if offset is not None and offset < 0:
                c.fail(EINVAL)
                return
            pos = offset if offset is not None else obj.pos

            def done(err: int, data: object) -> None:
                if c.cancelled:
                    return
                if err:
                    c.fail(err)
                    return
                if offset is None:
                    obj.pos = pos + len(data)
                c.complete(len(data), payload=data)

            self.vfs.read_range(obj.node, pos, n, done)
            return
        if isinstance(obj, DirHandle):
            c.fail(EISDIR)
            return
        pipe = self._stream_pipe(obj, for_read=True)
        if pipe is None:
            c.fail(ENOTCONN if isinstance(obj, SocketRef) else EBADF)
            return

        def deliver(err: int, data: object) -> None:
            if c.cancelled:
                return
            if err:
                c.fail(err)
            else:
                c.complete(len(data), payload=data)

        rec = pipe.read(n, deliver)
        if rec is not None:
            c.park(lambda: setattr(rec, "cancelled", True))

    def _sys_write(self, t: Task, c: CallCtx, fd: int, data: bytes) -> None:
        self._do_write(t, c, fd, data, offset=None)

    def _sys_pwrite(self, t: Task, c: CallCtx, fd: int, data: bytes,
                    offset: int) -> None:
        self._do_write(t, c, fd, data, offset=offset)

    def _do_write(self, t: Task, c: CallCtx, fd: int, data: bytes,
                  offset: Optional[int]) -> None:
        ent = t.fds.get(fd)
        if ent is None or not self._fd_writable(ent):
            c.fail(EBADF)
            return
        obj = ent.obj
        if isinstance(obj, FileHandle):
            if offset is not None and offset < 0:
                c.fail(EINVAL)
                return
            if offset is not None:
                pos = offset
            elif ent.flags & wire.O_APPEND:
                pos = obj.node.size()
            else:
                pos = obj.pos
            err, count = self.vfs.write_range(obj.node, pos, data)
            if err:
                c.fail(err)
                return
            if offset is None:
                obj.pos = pos + count
            c.complete(count)
            return
        if isinstance(obj, DirHandle):
            c.fail(EISDIR)
            return
        pipe = self._stream_pipe(obj, for_read=False)
        if pipe is None:
            c.fail(ENOTCONN if isinstance(obj, SocketRef) else EBADF)
            return

        def deliver(err: int, count: object) -> None:
            if c.cancelled:
                return
            if err:
                c.fail(err)
            else:
                c.complete(count)

        rec = pipe.write(data, deliver)
        if rec is not None:
            c.park(lambda: setattr(rec, "cancelled", True))

    def _stream_pipe(self, obj: object, for_read: bool) -> Optional[ipc.Pipe]:
        if isinstance(obj, ipc.PipeEnd):
            if obj.readable != for_read:
                return None
            return obj.pipe
        if isinstance(obj, SocketRef):
            ep = obj.endpoint
            if ep.state != ipc.S_CONNECTED:
                return None
            return ep.rx if for_read else ep.tx
        return None

    def _sys_llseek(self, t: Task, c: CallCtx, fd: int, offset: int,
                    whence: int) -> None:
        ent = t.fds.get(fd)
        if ent is None:
            c.fail(EBADF)
            return
        obj = ent.obj
        if isinstance(obj, FileHandle):
            size = obj.node.size()
            if whence == wire.SEEK_SET:
                new = offset
            elif whence == wire.SEEK_CUR:
                new = obj.pos + offset
            elif whence == wire.SEEK_END:
                new = size + offset
            else:
                c.fail(EINVAL)
                return
            if new < 0:
                c.fail(EINVAL)
                return
            obj.pos = new
            c.complete(new)
            return
        if isinstance(obj, DirHandle):
            if whence != wire.SEEK_SET or offset < 0:
                c.fail(EINVAL)
                return
            obj.offset = offset
            if offset == 0:
                obj.snapshot = None
            c.complete(offset)
            return
        c.fail(ESPIPE)

    def _sys_getdents(self, t: Task, c: CallCtx, fd: int, cap: int) -> None:
        ent = t.fds.get(fd)
        if ent is None:
            c.fail(EBADF)
            return
        obj = ent.obj
        if not isinstance(obj, DirHandle):
            c.fail(ENOTDIR)
            return
        if cap < 32:
            c.fail(EINVAL)
            return
        if obj.snapshot is None:
            err, snap = self.vfs.dir_snapshot(obj.path)
            if err:
                c.fail(err)
                return
            obj.snapshot = snap
        remaining = obj.snapshot[obj.offset:]
        if not remaining:
            c.complete(0, payload=b"")
            return
        try:
            buf, consumed = wire.encode_dirents(remaining, cap)
        except Exception:
            c.fail(EINVAL)
            return
        obj.offset += consumed
        c.complete(len(buf), payload=buf)

    def _sys_readdir(self, t: Task, c: CallCtx, path: str,
                     cap: int = 1 << 20) -> None:
        full = join_cwd(t.cwd, path)
        err, names = self.vfs.list_names(full)
        if err:
            c.fail(err)
            return
        payload = "\n".join(names).encode("utf-8")
        if len(payload) > cap:
            c.fail(ERANGE)
            return
        c.complete(len(payload), payload=payload)

    def _sys_stat(self, t: Task, c: CallCtx, path: str) -> None:
        err, rec = self.vfs.stat(join_cwd(t.cwd, path))
        if err:
            c.fail(err)
            return
        c.complete(0, payload=rec.encode())

    def _sys_lstat(self, t: Task, c: CallCtx, path: str) -> None:
        self._sys_stat(t, c, path)  # no symlink support

    def _sys_fstat(self, t: Task, c: CallCtx, fd: int) -> None:
        ent = t.fds.get(fd)
        if ent is None:
            c.fail(EBADF)
            return
        obj = ent.obj
        if isinstance(obj, FileHandle):
            rec = self.vfs.stat_node(obj.node)
        elif isinstance(obj, DirHandle):
            err, rec = self.vfs.stat(obj.path)
            if err:
                c.fail(err)
                return
        else:
            rec = wire.StatRecord(ino=0, size=0, mode=0o600,
                                  dtype=wire.DT_UNKNOWN, mtime_ns=0)
        c.complete(0, payload=rec.encode())

    def _sys_access(self, t: Task, c: CallCtx, path: str, amode: int) -> None:
        err = self.vfs.access(join_cwd(t.cwd, path), amode)
        if err:
            c.fail(err)
        else:
            c.complete(0)

    def _sys_readlink(self, t: Task, c: CallCtx, path: str) -> None:
        c.fail(EINVAL)  # no symlink support

    def _sys_utimes(self, t: Task, c: CallCtx, path: str, atime_ns: int,
                    mtime_ns: int) -> None:
        full = join_cwd(t.cwd, path)

        def done(err: int, _v: object) -> None:
            if c.cancelled:
                return
            if err:
                c.fail(err)
            else:
                c.complete(0)

        self.vfs.utimes(full, mtime_ns, done)

    def _sys_mkdir(self, t: Task, c: CallCtx, path: str, mode: int) -> None:
        self._vfs_simple(t, c, self.vfs.mkdir, join_cwd(t.cwd, path), mode)

    def _sys_rmdir(self, t: Task, c: CallCtx, path: str) -> None:
        self._vfs_simple(t, c, self.vfs.rmdir, join_cwd(t.cwd, path))

    def _sys_unlink(self, t: Task, c: CallCtx, path: str) -> None:
        self._vfs_simple(t, c, self.vfs.unlink, join_cwd(t.cwd, path))

    def _vfs_simple(self, t: Task, c: CallCtx, op, *args) -> None:
        def done(err: int, _v: object) -> None:
            if c.cancelled:
                return
            if err:
                c.fail(err)
            else:
                c.complete(0)

        op(*args, done)

    # -- pipes & sockets ---------------------------------------------------------------

    def _sys_pipe2(self, t: Task, c: CallCtx) -> None:
        rfd = t.alloc_fd()
        if rfd is None:
            c.fail(EMFILE)
            return
        pipe = self._new_pipe()
        pipe.add_reader()
        pipe.add_writer()
        t.fds[rfd] = FdEntry(obj=ipc.PipeEnd(pipe, readable=True), flags=wire.O_RDONLY)
        wfd = t.alloc_fd()
        if wfd is None:
            self._release_fd(t, rfd)
            pipe.release_writer()
            c.fail(EMFILE)
            return
        t.fds[wfd] = FdEntry(obj=ipc.PipeEnd(pipe, readable=False), flags=wire.O_WRONLY)
        c.complete(rfd, aux=wfd)

    def _socket_ep(self, t: Task, fd: int) -> Tuple[Optional[ipc.SocketEndpoint], int]:
        ent = t.fds.get(fd)
        if ent is None:
            return None, EBADF
        if not isinstance(ent.obj, SocketRef):
            return None, EBADF
        return ent.obj.endpoint, 0

    def _sys_socket(self, t: Task, c: CallCtx) -> None:
        fd = t.alloc_fd()
        if fd is None:
            c.fail(EMFILE)
            return
        ep = self.sockets.new_endpoint()
        t.fds[fd] = FdEntry(obj=SocketRef(ep), flags=wire.O_RDWR)
        c.complete(fd)

    def _sys_bind(self, t: Task, c: CallCtx, fd: int, port: int) -> None:
        ep, err = self._socket_ep(t, fd)
        if err:
            c.fail(err)
            return
        if port < 0 or port > 65535:
            c.fail(EINVAL)
            return
        err = self.sockets.bind(ep, port)
        c.complete(0) if err == 0 else c.fail(err)

    def _sys_listen(self, t: Task, c: CallCtx, fd: int, backlog: int) -> None:
        ep, err = self._socket_ep(t, fd)
        if err:
            c.fail(err)
            return
        err = self.sockets.listen(ep, backlog)
        c.complete(0) if err == 0 else c.fail(err)

    def _sys_accept(self, t: Task, c: CallCtx, fd: int) -> None:
        ep, err = self._socket_ep(t, fd)
        if err:
            c.fail(err)
            return

        def deliver(aerr: int, server_ep: object) -> None:
            if c.cancelled:
                if isinstance(server_ep, ipc.SocketEndpoint):
                    server_ep.close()
                return
            if aerr:
                c.fail(aerr)
                return
            newfd = t.alloc_fd()
            if newfd is None:
                server_ep.close()
                c.fail(EMFILE)
                return
            t.fds[newfd] = FdEntry(obj=SocketRef(server_ep), flags=wire.O_RDWR)
            c.complete(newfd)

        rec = self.sockets.accept(ep, deliver)
        if rec is not None and not c.done:
            c.park(lambda: setattr(rec, "cancelled", True))

    def _sys_connect(self, t: Task, c: CallCtx, fd: int, port: int) -> None:
        ep, err = self._socket_ep(t, fd)
        if err:
            c.fail(err)
            return

        def deliver(cerr: int, _v: object) -> None:
            if c.cancelled:
                return
            if cerr:
                c.fail(cerr)
            else:
                c.complete(0)

        pend = self.sockets.connect(ep, port, deliver)
        if pend is not None and not c.done:
            c.park(lambda: setattr(pend, "cancelled", True))

    def _sys_getsockname(self, t: Task, c: CallCtx, fd: int) -> None:
        ep, err = self._socket_ep(t, fd)
        if err:
            c.fail(err)
            return
        if ep.port is None:
            c.fail(EINVAL)
            return
        c.complete(ep.port)
