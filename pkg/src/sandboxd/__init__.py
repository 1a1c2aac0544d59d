"""sandboxd: a user-space Unix kernel emulator.

Processes run as isolated worker threads that talk to a single passive
kernel loop through message channels (async syscalls) or a shared region
with an atomic wake word (sync syscalls).  The kernel provides a process
table with signals and zombies, pipes with backpressure, loopback stream
sockets, and an overlay filesystem with a lazily fetched read-only underlay.
"""

from .errors import (
    FsInitError,
    SandboxError,
    status_exit_code,
    status_is_signal,
    status_signal,
    status_to_shell,
)
from .kernel import Kernel, ProcessHandle
from .vfs import DirProvider, FsConfig, HttpProvider, UnderlayProvider

__version__ = "0.1.0"

__all__ = [
    "Kernel",
    "ProcessHandle",
    "FsConfig",
    "DirProvider",
    "HttpProvider",
    "UnderlayProvider",
    "SandboxError",
    "FsInitError",
    "status_exit_code",
    "status_is_signal",
    "status_signal",
    "status_to_shell",
    "__version__",
]
