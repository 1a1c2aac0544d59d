"""Benchmark guest: times getpid round trips and prints one ns sample per
line, so the host harness can aggregate under either syscall convention."""

from __future__ import annotations

import time
from typing import List

from ..guest import GuestContext
from . import register


def bench_getpid_main(ctx: GuestContext, argv: List[str]) -> int:
    iters = int(argv[1]) if len(argv) > 1 else 1000
    samples = []
    expected = None
    for _ in range(iters):
        t0 = time.perf_counter_ns()
        pid = ctx.getpid()
        samples.append(time.perf_counter_ns() - t0)
        if expected is None:
            expected = pid
        elif pid != expected:
            ctx.stderr.write_str("bench-getpid: pid changed mid-run\n")
            return 1
    ctx.stdout.write_str("\n".join(map(str, samples)) + "\n")
    ctx.stdout.flush()
    return 0


register("bench-getpid", bench_getpid_main)
