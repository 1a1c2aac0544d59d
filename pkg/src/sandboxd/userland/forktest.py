"""Fork demonstration guest.

Forks once and checks the whole contract: the child resumes at the fork
site seeing 0, the parent sees the child pid, heap mutations in the child
stay invisible to the parent, wait4 reaps exactly once and a second wait4
fails with ECHILD.  Under the sync convention fork is unsupported; the
program reports ENOSYS and exits 2.
"""

from __future__ import annotations

from typing import List

from ..errors import ECHILD, ENOSYS
from ..guest import GuestContext, GuestOSError
from . import register

FORK_SITE = 1


def forktest_main(ctx: GuestContext, argv: List[str]) -> int:
    if ctx.fork_restore is None:
        heap = {"counter": 42, "buf": bytearray(b"forktest")}
        try:
            ret = ctx.fork_with_state(heap, FORK_SITE)
        except GuestOSError as e:
            if e.errno == ENOSYS:
                ctx.stdout.write_str("fork: ENOSYS\n")
                ctx.stdout.flush()
                return 2
            raise
    else:
        heap, pc = ctx.fork_restore
        if pc != FORK_SITE:
            ctx.stderr.write_str(f"forktest: bad resume pc {pc}\n")
            return 1
        ret = 0

    if ret == 0:
        # child: mutate the heap; the parent must never observe this
        heap["counter"] += 1
        heap["buf"][0:1] = b"F"
        ctx.stdout.write_str("child 0\n")
        ctx.stdout.flush()
        return 0

    ctx.stdout.write_str(f"parent {ret}\n")
    ctx.stdout.flush()
    ok = True
    try:
        pid, status = ctx.wait4(ret, 0)
        if pid != ret or status != 0:
            ctx.stderr.write_str(f"forktest: wait4 gave ({pid}, {status})\n")
            ok = False
    except GuestOSError as e:
        ctx.stderr.write_str(f"forktest: wait4 failed: {e}\n")
        ok = False
    if heap["counter"] != 42 or bytes(heap["buf"]) != b"forktest":
        ctx.stderr.write_str("forktest: child heap mutation leaked into parent\n")
        ok = False
    try:
        ctx.wait4(ret, 0)
        ctx.stderr.write_str("forktest: second wait4 unexpectedly succeeded\n")
        ok = False
    except GuestOSError as e:
        if e.errno != ECHILD:
            ctx.stderr.write_str(f"forktest: second wait4 errno {e.errno}\n")
            ok = False
    return 0 if ok else 1


register("forktest", forktest_main, snapshotable=True)
