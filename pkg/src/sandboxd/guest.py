"""Guest runtime: the library guest programs link against.

Provides the two syscall conventions (asynchronous continuation-passing
messages, and synchronous shared-region calls that block on the wake word),
signal handler dispatch, and a blocking facade used by the userland programs
so the same utility runs unchanged under either convention.
"""

from __future__ import annotations

import pickle
import traceback
from typing import Callable, Dict, List, Optional, Sequence, Tuple

from . import wire, workers
from .errors import EINTR, EINVAL, ENOSYS, strerror
from .workers import (
    AttachRegion, GuestImage, InitMessage, RegionGrant, SignalMessage,
    Shutdown, WorkerHandle,
)

REGION_SIZE = 1 << 20
RETVAL_OFF = 64
WAKE_OFF = 80
SCRATCH_OFF = 128

WRITE_CHUNK = 65536


class GuestOSError(Exception):
    def __init__(self, errno: int, context: str = ""):
        self.errno = errno
        self.context = context
        super().__init__(f"{context}: {strerror(errno)}" if context else strerror(errno))


class GuestExit(Exception):
    def __init__(self, code: int):
        self.code = code
        super().__init__(f"exit {code}")


class GuestKilled(Exception):
    """The kernel tore this worker down; unwind without touching the kernel."""


class _BufferedWriter:
    """Small write-combining buffer for a guest fd (stdout)."""

    def __init__(self, ctx: "GuestContext", fd: int, bufsize: int = 8192):
        self.ctx = ctx
        self.fd = fd
        self.bufsize = bufsize
        self._buf = bytearray()

    def write(self, data: bytes) -> None:
        if self.bufsize == 0:
            self.ctx.write_all(self.fd, data)
            return
        self._buf += data
        if len(self._buf) >= self.bufsize:
            self.flush()

    def write_str(self, text: str) -> None:
        self.write(text.encode("utf-8"))

    def flush(self) -> None:
        if self._buf:
            data = bytes(self._buf)
            self._buf.clear()
            self.ctx.write_all(self.fd, data)


class GuestContext:
    """Per-process guest state and syscall interface."""

    def __init__(self, handle: WorkerHandle, image: GuestImage, init: InitMessage):
        self.handle = handle
        self.argv = list(init.argv)
        self.environ = dict(init.environ)
        self.convention = image.convention
        self.snapshotable = image.snapshotable
        self.fork_restore: Optional[Tuple[object, int]] = None
        if init.fork_snapshot is not None:
            snap, pc = init.fork_snapshot
            self.fork_restore = (pickle.loads(snap), pc)
        self._ids = wire.CallIdAllocator()
        self._outstanding: Dict[int, Callable[[wire.SyscallReply], None]] = {}
        self._handlers: Dict[int, Callable[[int], None]] = {}
        self.region: Optional[workers.SharedRegion] = None
        self._scratch_top = SCRATCH_OFF
        self._exited = False
        self.stdout = _BufferedWriter(self, 1)
        self.stderr = _BufferedWriter(self, 2, bufsize=0)

    # -- plumbing -------------------------------------------------------------

    @property
    def sync_mode(self) -> bool:
        return self.region is not None

    def _check_killed(self) -> None:
        if self.handle.kill_flag.is_set():
            raise GuestKilled()

    def attach_region(self, size: int = REGION_SIZE) -> None:
        """Request the shared region and switch to the sync convention."""
        self.handle.post_to_kernel(AttachRegion(size, RETVAL_OFF, WAKE_OFF))
        while True:
            msg = self.handle.next_message()
            if isinstance(msg, Shutdown):
                raise GuestKilled()
            if isinstance(msg, RegionGrant):
                if msg.errno:
                    raise GuestOSError(msg.errno, "attach_region")
                self.region = msg.region
                return
            if isinstance(msg, SignalMessage):
                self._run_handler(msg.signal)

    def _run_handler(self, sig: int) -> None:
        fn = self._handlers.get(sig)
        if fn is None:
            return
        try:
            fn(sig)
        except (GuestExit, GuestKilled):
            raise
        except Exception:
            self.stderr.write_str(f"signal handler error:\n{traceback.format_exc()}")

    # -- async convention ---------------------------------------------------------

    def syscall_async(self, name: str, args: Sequence[object],
                      cont: Callable[[int, int, int], None],
                      want_payload: bool = False) -> None:
        """Issue an async syscall; cont(ret, aux, errno) runs exactly once.
        With want_payload the continuation receives a 4th payload argument."""
        self._check_killed()
        trap = wire.TRAPS.get(name, 0xFFFFFFFF)
        call_id = self._ids.allocate(self._outstanding)

        def dispatch(reply: wire.SyscallReply) -> None:
            if want_payload:
                cont(reply.ret, reply.aux, reply.errno, reply.payload)
            else:
                cont(reply.ret, reply.aux, reply.errno)

        self._outstanding[call_id] = dispatch
        env = wire.SyscallEnvelope(id=call_id, trap=trap, args=list(args))
        self.handle.post_to_kernel(env.encode())

    def pump_one(self, block: bool = True) -> bool:
        """Process one inbound message (reply or signal).  Returns False when
        nonblocking and the inbox is empty."""
        msg = self.handle.next_message() if block else self.handle.poll_message()
        if msg is None:
            return False
        self._check_killed()
        if isinstance(msg, Shutdown):
            raise GuestKilled()
        if isinstance(msg, SignalMessage):
            self._run_handler(msg.signal)
            return True
        if isinstance(msg, (bytes, bytearray)):
            reply = wire.SyscallReply.decode(bytes(msg))
            cont = self._outstanding.pop(reply.id, None)
            if cont is not None:
                cont(reply)
            return True
        return True

    def pump_until_idle(self) -> None:
        """Drain every outstanding async call (and deliver signals)."""
        while self._outstanding:
            self.pump_one(block=True)

    def _drain_signals(self) -> None:
        inbox = self.handle.to_guest
        while not inbox.empty():
            msg = self.handle.poll_message()
            if msg is None:
                return
            if isinstance(msg, Shutdown):
                raise GuestKilled()
            if isinstance(msg, SignalMessage):
                self._run_handler(msg.signal)

    def _async_call(self, name: str, args: Sequence[object]
                    ) -> Tuple[int, int, int, Optional[bytes]]:
        box: List[wire.SyscallReply] = []

        def cont(ret: int, aux: int, errno: int, payload: Optional[bytes]) -> None:
            box.append(wire.SyscallReply(0, ret, aux, errno, payload))

        self.syscall_async(name, args, cont, want_payload=True)
        while not box:
            self.pump_one(block=True)
        r = box[0]
        return r.ret, r.aux, r.errno, r.payload

    # -- sync convention -------------------------------------------------------------

    def _scratch_reset(self) -> None:
        self._scratch_top = SCRATCH_OFF

    def _scratch_cap(self) -> int:
        return self.region.size - self._scratch_top

    def _scratch_bytes(self, data: bytes) -> Tuple[int, int]:
        off = self._scratch_top
        self.region.write(off, data)
        self._scratch_top = off + len(data)
        return off, len(data)

    def _scratch_str(self, s: str) -> Tuple[int, int]:
        return self._scratch_bytes(s.encode("utf-8"))

    def _scratch_reserve(self, n: int) -> int:
        off = self._scratch_top
        if off + n > self.region.size:
            raise GuestOSError(EINVAL, "scratch exhausted")
        self._scratch_top = off + n
        return off

    def syscall_sync(self, trap: int, ints: Sequence[int]) -> Tuple[int, int]:
        """Send a compact envelope, atomically wait on the wake word, and
        return (ret, errno) from the retval slot."""
        self._check_killed()
        self._drain_signals()  # deliver anything that arrived between calls
        region = self.region
        call_id = self._ids.allocate(())
        env = wire.SyscallEnvelope(id=call_id, trap=trap, args=[int(x) for x in ints])
        self.handle.post_to_kernel(env.encode())
        while True:
            val = region.wait_u32_change(region.wake_off, wire.WAKE_PARKED, timeout=1.0)
            if self.handle.kill_flag.is_set():
                raise GuestKilled()
            if val == wire.WAKE_PARKED:
                continue  # timed poll: re-check the kill flag
            region.store_u32(region.wake_off, wire.WAKE_PARKED)  # consume
            if val == wire.WAKE_COMPLETE:
                return wire.sync_read_result(region)
            if val == wire.WAKE_SIGNAL:
                self._drain_signals()
                if trap in wire.INTERRUPTIBLE_TRAPS:
                    return -1, EINTR
                continue  # non-interruptible: wait for the real completion
            if val == wire.WAKE_KILLED:
                raise GuestKilled()

    # -- unified facade ----------------------------------------------------------------

    def _call(self, name: str, async_args: Sequence[object],
              sync_ints: Optional[Sequence[int]] = None,
              sync_out: Optional[Tuple[int, str]] = None,
              ) -> Tuple[int, int, int, Optional[bytes]]:
        """Dispatch through the task's convention.

        sync_out = (out_off, mode) where mode is 'ret' (payload length = ret)
        or 'stat' (fixed 32-byte record).
        """
        if not self.sync_mode:
            return self._async_call(name, async_args)
        ret, err = self.syscall_sync(wire.TRAPS[name], sync_ints or [])
        payload = None
        if err == 0 and sync_out is not None:
            off, mode = sync_out
            if mode == "ret":
                payload = self.region.read(off, max(ret, 0))
            elif mode == "stat":
                payload = self.region.read(off, wire.STAT_RECORD_LEN)
        return ret, 0, err, payload

    def _simple(self, name: str, async_args: Sequence[object],
                sync_ints: Optional[Sequence[int]] = None) -> int:
        ret, _, err, _ = self._call(name, async_args, sync_ints)
        if err:
            raise GuestOSError(err, name)
        return ret

    # process -----------------------------------------------------------------

    def getpid(self) -> int:
        self._scratch_reset()
        return self._simple("getpid", [], [])

    def getppid(self) -> int:
        self._scratch_reset()
        return self._simple("getppid", [], [])

    def getcwd(self) -> str:
        self._scratch_reset()
        if self.sync_mode:
            cap = min(self._scratch_cap(), 4096)
            off = self._scratch_reserve(cap)
            ret, _, err, payload = self._call(
                "getcwd", [], [off, cap], sync_out=(off, "ret"))
        else:
            ret, _, err, payload = self._call("getcwd", [])
        if err:
            raise GuestOSError(err, "getcwd")
        return (payload or b"").decode("utf-8")

    def chdir(self, path: str) -> None:
        self._scratch_reset()
        if self.sync_mode:
            po, pl = self._scratch_str(path)
            self._simple("chdir", [], [po, pl])
        else:
            self._simple("chdir", [path])

    def exit(self, code: int) -> None:
        self._do_exit(code)
        raise GuestExit(code)

    def _do_exit(self, code: int) -> None:
        if self._exited:
            return
        self._exited = True
        try:
            self.stdout.flush()
            self.stderr.flush()
        except (GuestOSError, GuestKilled):
            pass
        call_id = self._ids.allocate(self._outstanding)
        env = wire.SyscallEnvelope(id=call_id, trap=wire.TRAPS["exit"], args=[int(code)])
        self.handle.post_to_kernel(env.encode())

    def spawn(self, path: str, argv: Optional[Sequence[str]] = None,
              env: Optional[Dict[str, str]] = None,
              grants: Sequence[Tuple[int, int]] = ((0, 0), (1, 1), (2, 2))) -> int:
        argv = list(argv) if argv is not None else [path]
        env = dict(env) if env is not None else dict(self.environ)
        self._scratch_reset()
        if self.sync_mode:
            a_off, a_len = self._scratch_bytes(wire.pack_str_block([path, *argv]))
            kv = [f"{k}={v}" for k, v in env.items()]
            b_off, b_len = self._scratch_bytes(wire.pack_str_block(kv))
            c_off, c_len = self._scratch_bytes(wire.pack_pair_block(list(grants)))
            return self._simple("spawn", [], [a_off, a_len, b_off, b_len, c_off, c_len])
        kv = [f"{k}={v}" for k, v in env.items()]
        flat: List[int] = []
        for cfd, pfd in grants:
            flat += [cfd, pfd]
        args: List[object] = [path, len(argv), *argv, len(kv), *kv, flat]
        return self._simple("spawn", args)

    def wait4(self, pid: int, options: int = 0) -> Tuple[int, int]:
        self._scratch_reset()
        if self.sync_mode:
            ret, err = self.syscall_sync(wire.TRAPS["wait4"], [pid, options])
            if err:
                raise GuestOSError(err, "wait4")
            # pair-returning traps pack (pid, status) into one i64
            return ret & 0xFFFFFFFF, ret >> 32
        ret, aux, err, _ = self._call("wait4", [pid, options])
        if err:
            raise GuestOSError(err, "wait4")
        return ret, aux

    def kill(self, pid: int, sig: int) -> None:
        self._scratch_reset()
        self._simple("kill", [pid, sig], [pid, sig])

    def signal(self, sig: int, action) -> None:
        """action: callable handler, 'ignore', or 'default'."""
        if sig == wire.SIGKILL:
            raise GuestOSError(EINVAL, "signal")
        self._scratch_reset()
        if callable(action):
            disp = wire.DISP_HANDLED
        elif action == "ignore":
            disp = wire.DISP_IGNORE
        else:
            disp = wire.DISP_DEFAULT
        self._simple("signal_register", [sig, disp], [sig, disp])
        if callable(action):
            self._handlers[sig] = action
        else:
            self._handlers.pop(sig, None)

    def fork_with_state(self, state: object, resume_pc: int) -> int:
        """Fork: returns the child pid; the child re-enters main with
        fork_restore = (state, resume_pc) and must branch to the call site."""
        if self.sync_mode:
            raise GuestOSError(ENOSYS, "fork")
        if not self.snapshotable:
            raise GuestOSError(ENOSYS, "fork")
        snap = pickle.dumps(state)
        ret, _, err, _ = self._async_call("fork", [snap, int(resume_pc)])
        if err:
            raise GuestOSError(err, "fork")
        return ret

    # files ----------------------------------------------------------------------

    def open(self, path: str, flags: int, mode: int = 0o644) -> int:
        self._scratch_reset()
        if self.sync_mode:
            po, pl = self._scratch_str(path)
            return self._simple("open", [], [po, pl, flags, mode])
        return self._simple("open", [path, flags, mode])

    def close(self, fd: int) -> None:
        self._scratch_reset()
        self._simple("close", [fd], [fd])

    def read(self, fd: int, n: int, retry_eintr: bool = True) -> bytes:
        while True:
            try:
                return self._read_once(fd, n)
            except GuestOSError as e:
                if retry_eintr and e.errno == EINTR:
                    continue
                raise

    def _read_once(self, fd: int, n: int) -> bytes:
        self._scratch_reset()
        if self.sync_mode:
            n = min(n, self._scratch_cap())
            off = self._scratch_reserve(n)
            ret, _, err, payload = self._call(
                "read", [], [fd, off, n], sync_out=(off, "ret"))
        else:
            ret, _, err, payload = self._call("read", [fd, n])
        if err:
            raise GuestOSError(err, "read")
        return payload or b""

    def pread(self, fd: int, n: int, offset: int) -> bytes:
        self._scratch_reset()
        if self.sync_mode:
            n = min(n, self._scratch_cap())
            off = self._scratch_reserve(n)
            ret, _, err, payload = self._call(
                "pread", [], [fd, off, n, offset], sync_out=(off, "ret"))
        else:
            ret, _, err, payload = self._call("pread", [fd, n, offset])
        if err:
            raise GuestOSError(err, "pread")
        return payload or b""

    def write(self, fd: int, data: bytes, retry_eintr: bool = True) -> int:
        while True:
            try:
                return self._write_once(fd, data)
            except GuestOSError as e:
                if retry_eintr and e.errno == EINTR:
                    continue
                raise

    def _write_once(self, fd: int, data: bytes) -> int:
        self._scratch_reset()
        if self.sync_mode:
            off, n = self._scratch_bytes(bytes(data))
            return self._simple("write", [], [fd, off, n])
        return self._simple("write", [fd, bytes(data)])

    def pwrite(self, fd: int, data: bytes, offset: int) -> int:
        self._scratch_reset()
        if self.sync_mode:
            off, n = self._scratch_bytes(bytes(data))
            return self._simple("pwrite", [], [fd, off, n, offset])
        return self._simple("pwrite", [fd, bytes(data), offset])

    def write_all(self, fd: int, data: bytes) -> int:
        """Chunked write; under the sync convention large buffers would not
        fit the scratch area in one call."""
        view = memoryview(data)
        total = 0
        while total < len(view):
            total += self.write(fd, bytes(view[total:total + WRITE_CHUNK]))
        return total

    def llseek(self, fd: int, offset: int, whence: int) -> int:
        self._scratch_reset()
        return self._simple("llseek", [fd, offset, whence], [fd, offset, whence])

    def getdents(self, fd: int, cap: int = 8192) -> List[Tuple[str, int, int]]:
        self._scratch_reset()
        if self.sync_mode:
            cap = min(cap, self._scratch_cap())
            off = self._scratch_reserve(cap)
            ret, _, err, payload = self._call(
                "getdents", [], [fd, off, cap], sync_out=(off, "ret"))
        else:
            ret, _, err, payload = self._call("getdents", [fd, cap])
        if err:
            raise GuestOSError(err, "getdents")
        return wire.decode_dirents(payload or b"")

    def readdir(self, path: str) -> List[str]:
        self._scratch_reset()
        if self.sync_mode:
            po, pl = self._scratch_str(path)
            cap = min(self._scratch_cap(), 1 << 18)
            off = self._scratch_reserve(cap)
            ret, _, err, payload = self._call(
                "readdir", [], [po, pl, off, cap], sync_out=(off, "ret"))
        else:
            ret, _, err, payload = self._call("readdir", [path])
        if err:
            raise GuestOSError(err, "readdir")
        text = (payload or b"").decode("utf-8")
        return text.split("\n") if text else []

    def _stat_call(self, name: str, path: str) -> wire.StatRecord:
        self._scratch_reset()
        if self.sync_mode:
            po, pl = self._scratch_str(path)
            off = self._scratch_reserve(wire.STAT_RECORD_LEN)
            ret, _, err, payload = self._call(
                name, [], [po, pl, off], sync_out=(off, "stat"))
        else:
            ret, _, err, payload = self._call(name, [path])
        if err:
            raise GuestOSError(err, name)
        return wire.StatRecord.decode(payload)

    def stat(self, path: str) -> wire.StatRecord:
        return self._stat_call("stat", path)

    def lstat(self, path: str) -> wire.StatRecord:
        return self._stat_call("lstat", path)

    def fstat(self, fd: int) -> wire.StatRecord:
        self._scratch_reset()
        if self.sync_mode:
            off = self._scratch_reserve(wire.STAT_RECORD_LEN)
            ret, _, err, payload = self._call(
                "fstat", [], [fd, off], sync_out=(off, "stat"))
        else:
            ret, _, err, payload = self._call("fstat", [fd])
        if err:
            raise GuestOSError(err, "fstat")
        return wire.StatRecord.decode(payload)

    def access(self, path: str, amode: int = wire.F_OK) -> int:
        """Returns 0 when accessible, else the errno (does not raise)."""
        self._scratch_reset()
        try:
            if self.sync_mode:
                po, pl = self._scratch_str(path)
                self._simple("access", [], [po, pl, amode])
            else:
                self._simple("access", [path, amode])
            return 0
        except GuestOSError as e:
            return e.errno

    def readlink(self, path: str) -> str:
        self._scratch_reset()
        if self.sync_mode:
            po, pl = self._scratch_str(path)
            off = self._scratch_reserve(4096)
            ret, _, err, _ = self._call("readlink", [], [po, pl, off, 4096])
        else:
            ret, _, err, _ = self._call("readlink", [path])
        raise GuestOSError(err or EINVAL, "readlink")

    def utimes(self, path: str, atime_ns: int, mtime_ns: int) -> None:
        self._scratch_reset()
        if self.sync_mode:
            po, pl = self._scratch_str(path)
            self._simple("utimes", [], [po, pl, atime_ns, mtime_ns])
        else:
            self._simple("utimes", [path, atime_ns, mtime_ns])

    def mkdir(self, path: str, mode: int = 0o755) -> None:
        self._scratch_reset()
        if self.sync_mode:
            po, pl = self._scratch_str(path)
            self._simple("mkdir", [], [po, pl, mode])
        else:
            self._simple("mkdir", [path, mode])

    def rmdir(self, path: str) -> None:
        self._path_only("rmdir", path)

    def unlink(self, path: str) -> None:
        self._path_only("unlink", path)

    def _path_only(self, name: str, path: str) -> None:
        self._scratch_reset()
        if self.sync_mode:
            po, pl = self._scratch_str(path)
            self._simple(name, [], [po, pl])
        else:
            self._simple(name, [path])

    # pipes & sockets ------------------------------------------------------------------

    def pipe2(self) -> Tuple[int, int]:
        self._scratch_reset()
        if self.sync_mode:
            ret, err = self.syscall_sync(wire.TRAPS["pipe2"], [])
            if err:
                raise GuestOSError(err, "pipe2")
            return ret & 0xFFFFFFFF, ret >> 32
        ret, aux, err, _ = self._call("pipe2", [])
        if err:
            raise GuestOSError(err, "pipe2")
        return ret, aux

    def socket(self) -> int:
        self._scratch_reset()
        return self._simple("socket", [], [])

    def bind(self, fd: int, port: int) -> None:
        self._scratch_reset()
        self._simple("bind", [fd, port], [fd, port])

    def listen(self, fd: int, backlog: int = 0) -> None:
        self._scratch_reset()
        self._simple("listen", [fd, backlog], [fd, backlog])

    def accept(self, fd: int) -> int:
        self._scratch_reset()
        return self._simple("accept", [fd], [fd])

    def connect(self, fd: int, port: int) -> None:
        self._scratch_reset()
        self._simple("connect", [fd, port], [fd, port])

    def getsockname(self, fd: int) -> int:
        self._scratch_reset()
        return self._simple("getsockname", [fd], [fd])

    # convenience --------------------------------------------------------------------

    def read_all(self, fd: int, chunk: int = 65536) -> bytes:
        out = bytearray()
        while True:
            data = self.read(fd, chunk)
            if not data:
                return bytes(out)
            out += data


def bootstrap(handle: WorkerHandle, image: GuestImage) -> None:
    """Worker thread entry: gate on init, build the context, run main."""
    while True:
        msg = handle.next_message()
        if isinstance(msg, Shutdown):
            return
        if isinstance(msg, InitMessage):
            init = msg
            break
    ctx = GuestContext(handle, image, init)
    main = getattr(image.program, "main", None)
    try:
        if image.convention == "sync":
            ctx.attach_region()
        if main is None:
            code = 127
        else:
            code = _run_main(ctx, main)
        if not ctx._exited:
            ctx._do_exit(code)
    except GuestKilled:
        return
    except Exception:
        # runtime bug: make sure the kernel still sees an exit
        if not ctx._exited:
            try:
                ctx._do_exit(125)
            except Exception:
                pass


def _run_main(ctx: GuestContext, main: Callable[[GuestContext, List[str]], int]) -> int:
    try:
        code = main(ctx, list(ctx.argv))
        return 0 if code is None else int(code)
    except GuestExit as e:
        return e.code
    except GuestOSError as e:
        try:
            name = ctx.argv[0] if ctx.argv else "?"
            ctx.stderr.write_str(f"{name}: {e}\n")
        except Exception:
            pass
        return 1
    except GuestKilled:
        raise
    except Exception:
        try:
            ctx.stderr.write_str(traceback.format_exc())
        except Exception:
            pass
        return 1
