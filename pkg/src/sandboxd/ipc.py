"""Pipes and loopback stream sockets.

Pipes are bounded ring buffers with wait queues on both sides: empty-pipe
reads park until data or EOF, and writes larger than the free space park
until the entire payload has drained into the buffer (full-length completion,
which is what gives the system backpressure).  Sockets are pairs of directed
pipes plus a port registry with listen backlogs.

Everything here runs on the kernel loop; waiters hold continuations, never
threads.  Delivery callbacks receive (errno, value).
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Deque, Dict, List, Optional, Tuple

from .errors import (
    EADDRINUSE,
    EBADF,
    ECONNREFUSED,
    EINVAL,
    EPIPE,
)

DEFAULT_PIPE_CAPACITY = 65536
DEFAULT_BACKLOG = 16
EPHEMERAL_PORT_START = 49152

DeliverFn = Callable[[int, object], None]


class ParkedRead:
    __slots__ = ("n", "deliver", "cancelled")

    def __init__(self, n: int, deliver: DeliverFn):
        self.n = n
        self.deliver = deliver
        self.cancelled = False


class ParkedWrite:
    __slots__ = ("data", "offset", "total", "deliver", "cancelled")

    def __init__(self, data: bytes, offset: int, deliver: DeliverFn):
        self.data = data
        self.offset = offset
        self.total = len(data)
        self.deliver = deliver
        self.cancelled = False


class Pipe:
    """In-memory ring buffer with read- and write-side wait queues."""

    def __init__(self, capacity: int = DEFAULT_PIPE_CAPACITY):
        if capacity <= 0:
            raise ValueError("pipe capacity must be positive")
        self.capacity = capacity
        self._buf = bytearray(capacity)
        self._head = 0
        self._used = 0
        self.readers = 0
        self.writers = 0
        self.read_waiters: Deque[ParkedRead] = deque()
        self.write_waiters: Deque[ParkedWrite] = deque()
        self.freed = False
        # lifetime byte counters, used by conservation checks
        self.total_in = 0
        self.total_out = 0

    # -- ring primitives ---------------------------------------------------

    @property
    def used(self) -> int:
        return self._used

    @property
    def free(self) -> int:
        return self.capacity - self._used

    def _push(self, data: bytes) -> int:
        n = min(len(data), self.free)
        if n == 0:
            return 0
        tail = (self._head + self._used) % self.capacity
        first = min(n, self.capacity - tail)
        self._buf[tail:tail + first] = data[:first]
        if n > first:
            self._buf[0:n - first] = data[first:n]
        self._used += n
        self.total_in += n
        return n

    def _pop(self, n: int) -> bytes:
        n = min(n, self._used)
        first = min(n, self.capacity - self._head)
        out = bytes(self._buf[self._head:self._head + first])
        if n > first:
            out += bytes(self._buf[0:n - first])
        self._head = (self._head + n) % self.capacity
        self._used -= n
        self.total_out += n
        return out

    # -- refcounts -----------------------------------------------------------

    def add_reader(self) -> None:
        self.readers += 1

    def add_writer(self) -> None:
        self.writers += 1

    def release_reader(self) -> None:
        self.readers -= 1
        if self.readers == 0:
            # everything still parked on the write side can never drain
            while self.write_waiters:
                w = self.write_waiters.popleft()
                if not w.cancelled:
                    w.deliver(EPIPE, None)
            self._maybe_free()
        self._pump()

    def release_writer(self) -> None:
        self.writers -= 1
        if self.writers == 0:
            self._pump()  # drain remaining data, then EOF the parked readers
            while self.read_waiters:
                r = self.read_waiters.popleft()
                if not r.cancelled:
                    r.deliver(0, b"")
        self._maybe_free()

    def _maybe_free(self) -> None:
        if self.readers == 0 and self.writers == 0:
            self.freed = True

    # -- operations -----------------------------------------------------------

    def read(self, n: int, deliver: DeliverFn) -> Optional[ParkedRead]:
        """Deliver up to n bytes; b'' means EOF.  Returns a parked record
        when the call could not complete immediately."""
        if n < 0:
            deliver(EINVAL, None)
            return None
        if n == 0:
            deliver(0, b"")
            return None
        if self._used > 0:
            data = self._pop(n)
            deliver(0, data)
            self._pump()
            return None
        if self.writers == 0:
            deliver(0, b"")
            return None
        rec = ParkedRead(n, deliver)
        self.read_waiters.append(rec)
        return rec

    def write(self, data: bytes, deliver: DeliverFn) -> Optional[ParkedWrite]:
        """Append data; completion (with the full length) happens only after
        every byte has entered the buffer.  Returns a parked record when the
        payload exceeded the free space."""
        if self.readers == 0:
            deliver(EPIPE, None)
            return None
        if len(data) == 0:
            deliver(0, 0)
            return None
        moved = 0
        if not self.write_waiters:  # FIFO: earlier writers drain first
            moved = self._push(data)
        if moved == len(data):
            deliver(0, len(data))
            self._pump()
            return None
        rec = ParkedWrite(bytes(data), moved, deliver)
        self.write_waiters.append(rec)
        self._pump()
        return rec

    # -- wakeup engine ----------------------------------------------------------

    def _pump(self) -> None:
        """Move bytes between parked writers, the ring and parked readers
        until nothing changes.  No lost wakeups: any satisfiable waiter is
        completed within the same kernel event."""
        while True:
            progressed = False
            # satisfy parked readers from the buffer
            while self._used > 0 and self.read_waiters:
                r = self.read_waiters.popleft()
                if r.cancelled:
                    continue
                r.deliver(0, self._pop(r.n))
                progressed = True
            # feed the ring from parked writers
            while self.free > 0 and self.write_waiters:
                w = self.write_waiters[0]
                if w.cancelled:
                    self.write_waiters.popleft()
                    continue
                moved = self._push(w.data[w.offset:])
                w.offset += moved
                if moved:
                    progressed = True
                if w.offset == w.total:
                    self.write_waiters.popleft()
                    w.deliver(0, w.total)
                if moved == 0:
                    break
            # EOF any readers left behind after the last writer vanished
            if self.writers == 0 and self._used == 0 and self.read_waiters:
                while self.read_waiters:
                    r = self.read_waiters.popleft()
                    if not r.cancelled:
                        r.deliver(0, b"")
                progressed = True
            if not progressed:
                return


@dataclass
class PipeEnd:
    pipe: Pipe
    readable: bool

    def release(self) -> None:
        if self.readable:
            self.pipe.release_reader()
        else:
            self.pipe.release_writer()


# ---------------------------------------------------------------------------
# Sockets
# ---------------------------------------------------------------------------

S_FRESH = "fresh"
S_BOUND = "bound"
S_LISTENING = "listening"
S_CONNECTING = "connecting"
S_CONNECTED = "connected"
S_CLOSED = "closed"


class PendingConn:
    __slots__ = ("client", "deliver", "cancelled")

    def __init__(self, client: "SocketEndpoint", deliver: DeliverFn):
        self.client = client
        self.deliver = deliver
        self.cancelled = False


class SocketEndpoint:
    """One end of a loopback stream socket."""

    def __init__(self, table: "SocketTable"):
        self.table = table
        self.state = S_FRESH
        self.port: Optional[int] = None
        self.backlog: Optional[Deque[PendingConn]] = None
        self.backlog_limit = DEFAULT_BACKLOG
        self.accept_waiters: Deque[ParkedRead] = deque()  # deliver gets endpoint
        self.overflow: Deque[PendingConn] = deque()  # connects beyond the backlog
        self.rx: Optional[Pipe] = None
        self.tx: Optional[Pipe] = None

    def close(self) -> None:
        if self.state == S_CLOSED:
            return
        prev = self.state
        self.state = S_CLOSED
        if prev == S_LISTENING:
            self.table.ports.pop(self.port, None)
            for q in (self.backlog or deque()), self.overflow:
                for pend in q:
                    if not pend.cancelled:
                        pend.cancelled = True
                        pend.client.state = S_CLOSED
                        pend.deliver(ECONNREFUSED, None)
            self.backlog = None
        elif prev == S_BOUND:
            self.table.ports.pop(self.port, None)
        elif prev == S_CONNECTED:
            # our read side loses its reader; our write side loses its writer
            self.rx.release_reader()
            self.tx.release_writer()
        elif prev == S_CONNECTING:
            pass  # pending record is cancelled via its own flag by the kernel


class SocketTable:
    """Port registry shared by all endpoints of one kernel."""

    def __init__(self, pipe_capacity: int = DEFAULT_PIPE_CAPACITY,
                 on_listen: Optional[Callable[[int], None]] = None):
        self.ports: Dict[int, SocketEndpoint] = {}
        self.pipe_capacity = pipe_capacity
        self.on_listen = on_listen
        self._next_ephemeral = EPHEMERAL_PORT_START

    def new_endpoint(self) -> SocketEndpoint:
        return SocketEndpoint(self)

    def bind(self, ep: SocketEndpoint, port: int) -> int:
        if ep.state != S_FRESH:
            return EINVAL
        if port == 0:
            port = self._alloc_ephemeral()
            if port == 0:
                return EADDRINUSE
        elif port in self.ports:
            return EADDRINUSE
        ep.state = S_BOUND
        ep.port = port
        self.ports[port] = ep
        return 0

    def _alloc_ephemeral(self) -> int:
        for _ in range(65536 - EPHEMERAL_PORT_START):
            p = self._next_ephemeral
            self._next_ephemeral += 1
            if self._next_ephemeral > 65535:
                self._next_ephemeral = EPHEMERAL_PORT_START
            if p not in self.ports:
                return p
        return 0

    def listen(self, ep: SocketEndpoint, backlog: int) -> int:
        if ep.state != S_BOUND:
            return EINVAL
        ep.state = S_LISTENING
        ep.backlog = deque()
        ep.backlog_limit = backlog if backlog > 0 else DEFAULT_BACKLOG
        if self.on_listen is not None:
            self.on_listen(ep.port)
        return 0

    def connect(self, ep: SocketEndpoint, port: int, deliver: DeliverFn) -> Optional[PendingConn]:
        """Queue ep on the listener's backlog; completes when accepted."""
        if ep.state != S_FRESH and ep.state != S_BOUND:
            deliver(EINVAL, None)
            return None
        listener = self.ports.get(port)
        if listener is None or listener.state != S_LISTENING:
            deliver(ECONNREFUSED, None)
            return None
        ep.state = S_CONNECTING
        pend = PendingConn(ep, deliver)
        if len(listener.backlog) < listener.backlog_limit:
            listener.backlog.append(pend)
        else:
            listener.overflow.append(pend)
        self._pump_accepts(listener)
        return pend

    def accept(self, ep: SocketEndpoint, deliver: DeliverFn) -> Optional[ParkedRead]:
        """Dequeue a pending peer (parking while the backlog is empty) and
        deliver a fresh connected endpoint."""
        if ep.state != S_LISTENING:
            deliver(EINVAL, None)
            return None
        rec = ParkedRead(0, deliver)
        ep.accept_waiters.append(rec)
        self._pump_accepts(ep)
        return rec

    def _pump_accepts(self, listener: SocketEndpoint) -> None:
        while listener.backlog and listener.accept_waiters:
            pend = listener.backlog.popleft()
            if pend.cancelled:
                self._refill_backlog(listener)
                continue
            waiter = listener.accept_waiters.popleft()
            if waiter.cancelled:
                listener.backlog.appendleft(pend)
                continue
            server_ep = self.new_endpoint()
            c2s = Pipe(self.pipe_capacity)
            s2c = Pipe(self.pipe_capacity)
            for p in (c2s, s2c):
                p.add_reader()
                p.add_writer()
            client = pend.client
            client.state = S_CONNECTED
            client.tx, client.rx = c2s, s2c
            server_ep.state = S_CONNECTED
            server_ep.tx, server_ep.rx = s2c, c2s
            self._refill_backlog(listener)
            pend.deliver(0, None)
            waiter.deliver(0, server_ep)

    def _refill_backlog(self, listener: SocketEndpoint) -> None:
        while listener.overflow and len(listener.backlog) < listener.backlog_limit:
            listener.backlog.append(listener.overflow.popleft())
