"""Error numbers, host-facing exceptions, and the exit-status word encoding."""

from __future__ import annotations

import errno as _errno
import os

# Error numbers follow the conventional POSIX values so guests can use
# os.strerror() for messages.  They are part of the documented ABI.
EPERM = _errno.EPERM
ENOENT = _errno.ENOENT
ESRCH = _errno.ESRCH
EINTR = _errno.EINTR
EIO = _errno.EIO
EBADF = _errno.EBADF
ECHILD = _errno.ECHILD
EAGAIN = _errno.EAGAIN
ENOMEM = _errno.ENOMEM
EACCES = _errno.EACCES
EEXIST = _errno.EEXIST
ENOTDIR = _errno.ENOTDIR
EISDIR = _errno.EISDIR
EINVAL = _errno.EINVAL
EMFILE = _errno.EMFILE
ENOSPC = _errno.ENOSPC
ESPIPE = _errno.ESPIPE
EPIPE = _errno.EPIPE
ERANGE = _errno.ERANGE
ENOSYS = _errno.ENOSYS
ENOTEMPTY = _errno.ENOTEMPTY
ENOTCONN = _errno.ENOTCONN
EADDRINUSE = _errno.EADDRINUSE
ECONNREFUSED = _errno.ECONNREFUSED
ENOEXEC = _errno.ENOEXEC
EOPNOTSUPP = _errno.EOPNOTSUPP


def strerror(err: int) -> str:
    return os.strerror(err)


class SandboxError(Exception):
    """Base class for host-facing sandboxd errors."""


class UnknownExecutable(SandboxError):
    """Image entry does not name a registered guest program."""


class LaunchFailure(SandboxError):
    """The host thread backing a worker could not be started."""


class WorkerGone(SandboxError):
    """Message sent to a worker that has already been terminated."""


class AlreadyAttached(SandboxError):
    """A second shared region attach was attempted for the same worker."""


class BadOffset(SandboxError):
    """Shared region offsets out of bounds or misaligned."""


class CapTooSmall(SandboxError):
    """Directory-entry buffer cannot hold even the first record."""


class MalformedResponse(SandboxError):
    """HTTP response bytes could not be parsed."""


class FsInitError(SandboxError):
    """Filesystem (underlay provider) initialization failed at boot."""


class KernelNotBooted(SandboxError):
    """Host API used before boot completed."""


# ---------------------------------------------------------------------------
# Exit status words.
#
# A status word packs how a process ended:
#   * normal exit:   (code & 0xff) << 8, low byte zero
#   * signal death:  (128 + signal) in the low byte
# The shell's $? is the low byte when set, otherwise the exit code.
# ---------------------------------------------------------------------------

def status_from_exit(code: int) -> int:
    return (code & 0xFF) << 8


def status_from_signal(sig: int) -> int:
    return (128 + sig) & 0xFF


def status_is_signal(status: int) -> bool:
    return (status & 0xFF) != 0


def status_exit_code(status: int) -> int:
    return (status >> 8) & 0xFF


def status_signal(status: int) -> int:
    return (status & 0xFF) - 128


def status_to_shell(status: int) -> int:
    """Collapse a status word to the single-byte convention used by $?."""
    if status_is_signal(status):
        return status & 0xFF
    return status_exit_code(status)
