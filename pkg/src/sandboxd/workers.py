"""Guest execution contexts: one host thread per process, shared-nothing
message channels toward the kernel, and the optional shared region used by
the synchronous syscall convention.

A worker can talk to exactly one kernel endpoint.  Kernel-to-guest delivery
is a per-worker FIFO queue; guest-to-kernel delivery goes through a posting
callback installed at launch (the kernel's event queue).  Payload-carrying
messages are encoded bytes, so buffers are copied, never aliased - the only
shared memory is an explicitly granted SharedRegion.
"""

from __future__ import annotations

import queue
import struct
import threading
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Tuple

from .errors import AlreadyAttached, BadOffset, LaunchFailure, WorkerGone
from . import wire

_U32 = struct.Struct("<I")


class SharedRegion:
    """Byte array shared between the kernel and one guest thread.

    Plain reads/writes are ordinary memory operations (single-word loads and
    stores are atomic under the runtime).  The wake word at wake_off is
    paired with a futex-style parking primitive: the kernel's notify is a
    lock release, the guest's wait is a lock acquire, so every wake pairs
    with exactly one wait and the handoff orders the retval-slot write
    before the woken read.
    """

    def __init__(self, size: int, retval_off: int, wake_off: int):
        self.data = bytearray(size)
        self.size = size
        self.retval_off = retval_off
        self.wake_off = wake_off
        # locked <=> no wake pending
        self._park = threading.Lock()
        self._park.acquire()

    def read(self, off: int, n: int) -> bytes:
        if off < 0 or n < 0 or off + n > self.size:
            raise BadOffset(f"read [{off}, {off + n}) outside region of {self.size}")
        return bytes(self.data[off:off + n])

    def write(self, off: int, data: bytes) -> None:
        if off < 0 or off + len(data) > self.size:
            raise BadOffset(f"write [{off}, {off + len(data)}) outside region of {self.size}")
        self.data[off:off + len(data)] = data

    def load_u32(self, off: int) -> int:
        return _U32.unpack_from(self.data, off)[0]

    def store_u32(self, off: int, value: int, notify: bool = False) -> None:
        _U32.pack_into(self.data, off, value)
        if notify:
            try:
                self._park.release()
            except RuntimeError:
                # double wake can only happen on forced teardown, where the
                # terminal KILLED value has already overwritten the word
                pass

    def wait_u32_change(self, off: int, while_value: int, timeout: Optional[float] = None) -> int:
        """Park until the kernel's next wake; returns the wake-word value
        (while_value again when the timeout elapsed first)."""
        if timeout is None:
            ok = self._park.acquire()
        else:
            ok = self._park.acquire(True, timeout)
        if not ok:
            return while_value
        return _U32.unpack_from(self.data, off)[0]


@dataclass
class GuestEntry:
    """Resolved entry point: a registered program, optionally reached through
    a shebang interpreter."""

    kind: str  # "registered" | "interpreter"
    program: str  # registry key actually executed
    script: Optional[str] = None  # script path when kind == "interpreter"


@dataclass
class GuestImage:
    payload: bytes
    entry: GuestEntry
    argv: List[str]
    environ: Dict[str, str]
    fork_snapshot: Optional[Tuple[bytes, int]] = None
    convention: str = "async"  # "async" | "sync"
    snapshotable: bool = False
    # runtime stand-in for the executable payload: the registered program
    # object whose main() the worker runs
    program: object = None


@dataclass
class InitMessage:
    argv: List[str]
    environ: Dict[str, str]
    fork_snapshot: Optional[Tuple[bytes, int]] = None


@dataclass
class SignalMessage:
    signal: int


@dataclass
class AttachRegion:
    """Guest-to-kernel request to share a region (sync-convention setup)."""

    size: int
    retval_off: int
    wake_off: int


@dataclass
class RegionGrant:
    """Kernel-to-guest reply to AttachRegion.  The region reference is the
    one deliberate exception to channel copy semantics."""

    region: Optional[SharedRegion]
    errno: int = 0


class Shutdown:
    """Channel sentinel: the worker is being torn down."""


_worker_ids = iter(range(1, 1 << 62))
_worker_ids_lock = threading.Lock()


class WorkerHandle:
    """Kernel-side handle for one guest context."""

    def __init__(self, post_to_kernel: Callable[["WorkerHandle", object], None]):
        with _worker_ids_lock:
            self.worker_id = next(_worker_ids)
        self.to_guest: "queue.SimpleQueue[object]" = queue.SimpleQueue()
        self.thread: Optional[threading.Thread] = None
        self.shared: Optional[SharedRegion] = None
        self.terminated = False
        self.kill_flag = threading.Event()
        self._post = post_to_kernel

    # guest-side API -------------------------------------------------------

    def post_to_kernel(self, msg: object) -> None:
        """Send a message from the guest thread to the kernel endpoint."""
        if self.terminated:
            return  # silently dropped; kernel discards late messages anyway
        self._post(self, msg)

    def next_message(self) -> object:
        return self.to_guest.get()

    def poll_message(self) -> Optional[object]:
        try:
            return self.to_guest.get_nowait()
        except queue.Empty:
            return None


def launch_worker(
    image: GuestImage,
    post_to_kernel: Callable[[WorkerHandle, object], None],
    bootstrap: Callable[[WorkerHandle, GuestImage], None],
    name: str = "guest",
) -> WorkerHandle:
    """Start a host thread running `bootstrap`; guest main is gated on the
    init message, which the caller sends after registering the handle."""
    handle = WorkerHandle(post_to_kernel)

    def run() -> None:
        bootstrap(handle, image)

    t = threading.Thread(target=run, name=f"{name}-w{handle.worker_id}", daemon=True)
    handle.thread = t
    try:
        t.start()
    except RuntimeError as e:  # thread limit reached
        raise LaunchFailure(str(e)) from e
    return handle


def send_to_guest(handle: WorkerHandle, msg: object) -> None:
    if handle.terminated:
        raise WorkerGone(f"worker {handle.worker_id} terminated")
    handle.to_guest.put(msg)


def terminate_worker(handle: WorkerHandle) -> None:
    """Idempotent forced teardown: flags the guest, wakes any waits."""
    if handle.terminated:
        return
    handle.terminated = True
    handle.kill_flag.set()
    handle.to_guest.put(Shutdown())
    if handle.shared is not None:
        wire.sync_kill(handle.shared)


def attach_shared_region(
    handle: WorkerHandle, size: int, retval_off: int, wake_off: int
) -> SharedRegion:
    if handle.shared is not None:
        raise AlreadyAttached(f"worker {handle.worker_id} already has a region")
    if retval_off < 0 or wake_off < 0 or retval_off + 16 > size or wake_off + 16 > size:
        raise BadOffset("offsets + 16 must fit inside the region")
    if wake_off % 4 != 0:
        raise BadOffset("wake offset must be 4-byte aligned")
    region = SharedRegion(size, retval_off, wake_off)
    handle.shared = region
    return region
