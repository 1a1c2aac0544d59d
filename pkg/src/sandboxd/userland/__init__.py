"""Guest programs: the coreutils set, the shell, forktest and the demo
HTTP server.

Programs are native functions compiled into the artifact, registered by
name; executable files on the VFS carry a one-line native marker that maps
back to the registry.  A file beginning with a shebang line runs through
its interpreter instead.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Dict, List

NATIVE_MAGIC = b"\x7fNAT "


@dataclass
class Program:
    name: str
    main: Callable  # main(ctx, argv) -> int
    snapshotable: bool = False


REGISTRY: Dict[str, Program] = {}


def register(name: str, main: Callable, snapshotable: bool = False) -> Program:
    prog = Program(name=name, main=main, snapshotable=snapshotable)
    REGISTRY[name] = prog
    return prog


def native_marker(name: str) -> bytes:
    """File content for a registered executable staged on the VFS."""
    return NATIVE_MAGIC + name.encode("utf-8") + b"\n"


def install_userland(kernel) -> None:
    """Stage /usr/bin/* and /bin/sh into the kernel's filesystem."""
    kernel.stage_dir("/bin")
    kernel.stage_dir("/usr/bin")
    kernel.stage_dir("/tmp")
    kernel.stage_dir("/home")
    for name in sorted(REGISTRY):
        kernel.stage_file(f"/usr/bin/{name}", native_marker(name), mode=0o755)
    kernel.stage_file("/bin/sh", native_marker("sh"), mode=0o755)


from . import bench_guest, coreutils, forktest, httpd, shell  # noqa: E402,F401  (registration side effects)
