"""Syscall wire formats: envelopes, replies, dirent records, sync-call slots.

Everything here is part of the documented ABI (see docs/abi.md): the trap
number table, the tagged value encoding (tag byte + little-endian payload),
the dirent record layout, and the shared-region retval slot layout.  Encoders
and decoders are pure; the only cross-thread pieces are the sync-slot
helpers, which operate on a shared region owned by the worker layer.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Iterable, List, Optional, Sequence, Tuple, Union

from .errors import CapTooSmall

Value = Union[int, str, bytes, List[int]]

# Value tags
TAG_I64 = 1
TAG_STR = 2
TAG_BYTES = 3
TAG_I64LIST = 4

_U32 = struct.Struct("<I")
_I64 = struct.Struct("<q")
_I32 = struct.Struct("<i")

# ---------------------------------------------------------------------------
# Trap table.  Numbers are stable and deliberately unrelated to any native
# kernel's numbering.
# ---------------------------------------------------------------------------

TRAPS = {
    "exit": 1,
    "getpid": 2,
    "getppid": 3,
    "getcwd": 4,
    "chdir": 5,
    "spawn": 6,
    "fork": 7,
    "wait4": 8,
    "kill": 9,
    "signal_register": 10,
    "pipe2": 11,
    "open": 12,
    "close": 13,
    "read": 14,
    "write": 15,
    "pread": 16,
    "pwrite": 17,
    "llseek": 18,
    "getdents": 19,
    "readdir": 20,
    "stat": 21,
    "lstat": 22,
    "fstat": 23,
    "access": 24,
    "readlink": 25,
    "utimes": 26,
    "mkdir": 27,
    "rmdir": 28,
    "unlink": 29,
    "socket": 30,
    "bind": 31,
    "listen": 32,
    "accept": 33,
    "connect": 34,
    "getsockname": 35,
}

TRAP_NAMES = {num: name for name, num in TRAPS.items()}

# Blocking calls that fail with EINTR when a handled signal interrupts the
# wait.  Shared between kernel and guest runtime (single source of truth).
INTERRUPTIBLE_TRAPS = frozenset(
    TRAPS[n] for n in ("read", "write", "pread", "pwrite", "accept", "connect", "wait4")
)

# Wake-word states for the synchronous convention.
WAKE_PARKED = 0
WAKE_COMPLETE = 1
WAKE_SIGNAL = 2
WAKE_KILLED = 3

# Signals
SIGINT = 2
SIGKILL = 9
SIGUSR1 = 10
SIGUSR2 = 12
SIGTERM = 15
SIGCHLD = 17

SIGNAL_NUMBERS = frozenset({SIGINT, SIGKILL, SIGUSR1, SIGUSR2, SIGTERM, SIGCHLD})

# Signal dispositions carried by the signal_register trap.
DISP_DEFAULT = 0
DISP_IGNORE = 1
DISP_HANDLED = 2

# wait4 options
WNOHANG = 1

# open flags (conventional values, part of our ABI)
O_RDONLY = 0x0
O_WRONLY = 0x1
O_RDWR = 0x2
O_ACCMODE = 0x3
O_CREAT = 0x40
O_EXCL = 0x80
O_TRUNC = 0x200
O_APPEND = 0x400
O_DIRECTORY = 0x10000

# llseek whence
SEEK_SET = 0
SEEK_CUR = 1
SEEK_END = 2

# access modes
F_OK = 0
X_OK = 1
W_OK = 2
R_OK = 4

# dirent dtype values
DT_UNKNOWN = 0
DT_DIR = 4
DT_REG = 8


# ---------------------------------------------------------------------------
# Tagged values
# ---------------------------------------------------------------------------

def _encode_value(out: bytearray, v: Value) -> None:
    if isinstance(v, bool):
        raise TypeError("bool is not a wire value")
    if isinstance(v, int):
        out.append(TAG_I64)
        out += _I64.pack(v)
    elif isinstance(v, str):
        raw = v.encode("utf-8")
        out.append(TAG_STR)
        out += _U32.pack(len(raw))
        out += raw
    elif isinstance(v, (bytes, bytearray, memoryview)):
        raw = bytes(v)  # copy at send time
        out.append(TAG_BYTES)
        out += _U32.pack(len(raw))
        out += raw
    elif isinstance(v, list):
        out.append(TAG_I64LIST)
        out += _U32.pack(len(v))
        for item in v:
            out += _I64.pack(item)
    else:
        raise TypeError(f"unsupported wire value type: {type(v)!r}")


def _decode_value(buf: memoryview, off: int) -> Tuple[Value, int]:
    tag = buf[off]
    off += 1
    if tag == TAG_I64:
        (v,) = _I64.unpack_from(buf, off)
        return v, off + 8
    if tag == TAG_STR:
        (n,) = _U32.unpack_from(buf, off)
        off += 4
        return bytes(buf[off:off + n]).decode("utf-8"), off + n
    if tag == TAG_BYTES:
        (n,) = _U32.unpack_from(buf, off)
        off += 4
        return bytes(buf[off:off + n]), off + n
    if tag == TAG_I64LIST:
        (n,) = _U32.unpack_from(buf, off)
        off += 4
        vals = [
            _I64.unpack_from(buf, off + 8 * i)[0]
            for i in range(n)
        ]
        return vals, off + 8 * n
    raise ValueError(f"bad value tag {tag}")


# ---------------------------------------------------------------------------
# Envelopes and replies
# ---------------------------------------------------------------------------

@dataclass
class SyscallEnvelope:
    id: int
    trap: int
    args: List[Value] = field(default_factory=list)

    def encode(self) -> bytes:
        out = bytearray()
        out += _U32.pack(self.id)
        out += _U32.pack(self.trap)
        out.append(len(self.args))
        for a in self.args:
            _encode_value(out, a)
        return bytes(out)

    @classmethod
    def decode(cls, raw: bytes) -> "SyscallEnvelope":
        buf = memoryview(raw)
        (id_,) = _U32.unpack_from(buf, 0)
        (trap,) = _U32.unpack_from(buf, 4)
        argc = buf[8]
        off = 9
        args: List[Value] = []
        for _ in range(argc):
            v, off = _decode_value(buf, off)
            args.append(v)
        return cls(id=id_, trap=trap, args=args)


@dataclass
class SyscallReply:
    id: int
    ret: int
    aux: int = 0
    errno: int = 0
    payload: Optional[bytes] = None

    def encode(self) -> bytes:
        out = bytearray()
        out += _U32.pack(self.id)
        out += _I64.pack(self.ret)
        out += _I64.pack(self.aux)
        out += _I32.pack(self.errno)
        if self.payload is None:
            out.append(0)
        else:
            out.append(1)
            out += _U32.pack(len(self.payload))
            out += self.payload
        return bytes(out)

    @classmethod
    def decode(cls, raw: bytes) -> "SyscallReply":
        buf = memoryview(raw)
        (id_,) = _U32.unpack_from(buf, 0)
        (ret,) = _I64.unpack_from(buf, 4)
        (aux,) = _I64.unpack_from(buf, 12)
        (err,) = _I32.unpack_from(buf, 20)
        payload = None
        if buf[24]:
            (n,) = _U32.unpack_from(buf, 25)
            payload = bytes(buf[29:29 + n])
        return cls(id=id_, ret=ret, aux=aux, errno=err, payload=payload)


_SYNC_ENC_CACHE: dict = {}


def encode_sync_envelope(call_id: int, trap: int, ints: Sequence[int]) -> bytes:
    """Fast path for the compact all-integer envelopes of the synchronous
    convention; the wire format is identical to SyscallEnvelope.encode."""
    n = len(ints)
    st = _SYNC_ENC_CACHE.get(n)
    if st is None:
        st = struct.Struct("<IIB" + "Bq" * n)
        _SYNC_ENC_CACHE[n] = st
    flat = [x for v in ints for x in (TAG_I64, int(v))]
    return st.pack(call_id, trap, n, *flat)


class CallIdAllocator:
    """Per-process syscall id source; ids are never reused while outstanding."""

    MAX = 0xFFFFFFFF

    def __init__(self, start: int = 0):
        self._counter = start  # last id handed out

    def allocate(self, outstanding: Iterable[int]) -> int:
        live = set(outstanding)
        if len(live) >= self.MAX:
            raise RuntimeError("call id space exhausted")
        nxt = self._counter
        while True:
            nxt = (nxt % self.MAX) + 1  # wraps to 1, never 0
            if nxt not in live:
                self._counter = nxt
                return nxt


# ---------------------------------------------------------------------------
# Directory entry records.
#
# Layout (little endian):
#   ino      u64
#   next_off u64   absolute offset of the following record in this buffer
#   reclen   u16
#   dtype    u8
#   name     utf-8 bytes, NUL terminated, zero padded to 8-byte alignment
#
# reclen = 19-byte header + name + NUL, rounded up to a multiple of 8.
# ---------------------------------------------------------------------------

_DIRENT_HDR = struct.Struct("<QQHB")
DIRENT_HEADER_LEN = _DIRENT_HDR.size  # 19


def dirent_reclen(name: str) -> int:
    raw = name.encode("utf-8")
    return (DIRENT_HEADER_LEN + len(raw) + 1 + 7) & ~7


def encode_dirents(
    entries: Sequence[Tuple[str, int, int]], cap: int
) -> Tuple[bytes, int]:
    """Pack a maximal prefix of (name, ino, dtype) records into <= cap bytes.

    Returns (buffer, number of entries consumed).  Raises CapTooSmall when
    the first record alone does not fit.
    """
    if cap < 32:
        raise ValueError("cap must be >= 32")
    out = bytearray()
    consumed = 0
    for name, ino, dtype in entries:
        reclen = dirent_reclen(name)
        if len(out) + reclen > cap:
            if consumed == 0:
                raise CapTooSmall(f"record for {name!r} needs {reclen} > cap {cap}")
            break
        start = len(out)
        raw = name.encode("utf-8")
        out += _DIRENT_HDR.pack(ino, start + reclen, reclen, dtype)
        out += raw
        out += b"\x00" * (reclen - DIRENT_HEADER_LEN - len(raw))
        consumed += 1
    return bytes(out), consumed


def decode_dirents(buf: bytes) -> List[Tuple[str, int, int]]:
    """Inverse of encode_dirents: unpack records into (name, ino, dtype)."""
    out: List[Tuple[str, int, int]] = []
    off = 0
    view = memoryview(buf)
    while off < len(view):
        ino, _next_off, reclen, dtype = _DIRENT_HDR.unpack_from(view, off)
        name_field = bytes(view[off + DIRENT_HEADER_LEN:off + reclen])
        name = name_field.split(b"\x00", 1)[0].decode("utf-8")
        out.append((name, ino, dtype))
        off += reclen
    return out


# ---------------------------------------------------------------------------
# Stat record: fixed 32-byte metadata block used by stat/lstat/fstat replies.
#   ino u64 | size i64 | mode u32 | dtype u8 | pad[3] | mtime_ns i64
# ---------------------------------------------------------------------------

_STAT = struct.Struct("<QqIB3xq")
STAT_RECORD_LEN = _STAT.size  # 32


@dataclass
class StatRecord:
    ino: int
    size: int
    mode: int
    dtype: int
    mtime_ns: int

    def encode(self) -> bytes:
        return _STAT.pack(self.ino, self.size, self.mode, self.dtype, self.mtime_ns)

    @classmethod
    def decode(cls, raw: bytes) -> "StatRecord":
        ino, size, mode, dtype, mtime = _STAT.unpack(raw[:STAT_RECORD_LEN])
        return cls(ino=ino, size=size, mode=mode, dtype=dtype, mtime_ns=mtime)

    @property
    def is_dir(self) -> bool:
        return self.dtype == DT_DIR


# ---------------------------------------------------------------------------
# Synchronous call slot.
#
# The retval slot occupies 16 bytes at retval_off in the shared region:
#   ret   i64 at +0
#   errno i32 at +8
#   seq   u32 at +12   (increments per completion; debugging aid)
# The wake word is a u32 at wake_off, written only by the kernel and reset
# to WAKE_PARKED only by the guest.
# ---------------------------------------------------------------------------

SYNC_SLOT_LEN = 16

_RESULT = struct.Struct("<qiI")
_RESULT_VALUES = struct.Struct("<qi")


def sync_complete(region, ret: int, errno: int) -> None:
    """Publish (ret, errno, seq), then flip the wake word to COMPLETE and
    notify; the slot write happens before the wake flip."""
    region.seq = (region.seq + 1) & 0xFFFFFFFF
    _RESULT.pack_into(region.data, region.retval_off, ret, errno, region.seq)
    region.store_u32(region.wake_off, WAKE_COMPLETE, notify=True)


def sync_signal(region) -> None:
    """Wake a parked guest for signal delivery; the retval slot is untouched."""
    region.store_u32(region.wake_off, WAKE_SIGNAL, notify=True)


def sync_kill(region) -> None:
    region.store_u32(region.wake_off, WAKE_KILLED, notify=True)


def sync_read_result(region) -> Tuple[int, int]:
    off = region.retval_off
    (ret,) = _I64.unpack_from(region.data, off)
    (err,) = _I32.unpack_from(region.data, off + 8)
    return ret, err


# Helpers for packing string/pair blocks used by the sync convention for
# calls whose arguments are not plain integers (spawn).

def pack_str_block(strings: Sequence[str]) -> bytes:
    out = bytearray(struct.pack("<H", len(strings)))
    for s in strings:
        raw = s.encode("utf-8")
        out += _U32.pack(len(raw))
        out += raw
    return bytes(out)


def unpack_str_block(raw: bytes) -> List[str]:
    (count,) = struct.unpack_from("<H", raw, 0)
    off = 2
    out = []
    for _ in range(count):
        (n,) = _U32.unpack_from(raw, off)
        off += 4
        out.append(raw[off:off + n].decode("utf-8"))
        off += n
    return out


def pack_pair_block(pairs: Sequence[Tuple[int, int]]) -> bytes:
    out = bytearray(struct.pack("<H", len(pairs)))
    for a, b in pairs:
        out += _U32.pack(a)
        out += _U32.pack(b)
    return bytes(out)


def unpack_pair_block(raw: bytes) -> List[Tuple[int, int]]:
    (count,) = struct.unpack_from("<H", raw, 0)
    off = 2
    out = []
    for _ in range(count):
        (a,) = _U32.unpack_from(raw, off)
        (b,) = _U32.unpack_from(raw, off + 4)
        out.append((a, b))
        off += 8
    return out
