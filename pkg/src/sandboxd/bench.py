"""getpid latency microbenchmark.

Three modes: `baseline` measures the raw round trip between a bare worker
thread and a consumer loop over the same queue primitives the real channels
use (a ping-pong worker replying as fast as it can); `async` and `sync`
measure the full getpid syscall path under each convention.  Reports
min/median/p99/mean in nanoseconds plus each mode's ratio to the baseline,
and machine-readable `mode,median_ns,ratio` lines.
"""

from __future__ import annotations

import queue
import statistics
import threading
import time
from dataclasses import dataclass
from typing import Dict, List, Optional

from .kernel import Kernel

WARMUP_FRACTION = 0.2

MODES = ("baseline", "async", "sync")


@dataclass
class BenchResult:
    mode: str
    iters: int
    min_ns: int
    median_ns: float
    p99_ns: int
    mean_ns: float
    ratio: float = 1.0

    def human(self) -> str:
        return (f"{self.mode:>8}: n={self.iters}  min={self.min_ns}ns  "
                f"median={self.median_ns:.0f}ns  p99={self.p99_ns}ns  "
                f"mean={self.mean_ns:.0f}ns  ratio={self.ratio:.2f}")

    def csv(self) -> str:
        return f"{self.mode},{self.median_ns:.0f},{self.ratio:.4f}"


def _aggregate(mode: str, samples: List[int]) -> BenchResult:
    n = len(samples)
    ordered = sorted(samples)
    return BenchResult(
        mode=mode,
        iters=n,
        min_ns=ordered[0],
        median_ns=statistics.median(samples),
        p99_ns=ordered[min(n - 1, int(0.99 * (n - 1)))],
        mean_ns=statistics.fmean(samples),
    )


def _with_warmup(iters: int) -> int:
    return iters + int(iters * WARMUP_FRACTION)


def measure_baseline(iters: int) -> BenchResult:
    """Ping-pong round trip between two threads over SimpleQueues."""
    total = _with_warmup(iters)
    to_worker: "queue.SimpleQueue[object]" = queue.SimpleQueue()
    to_main: "queue.SimpleQueue[object]" = queue.SimpleQueue()

    def worker() -> None:
        while True:
            msg = to_worker.get()
            if msg is None:
                return
            to_main.put(msg)

    t = threading.Thread(target=worker, name="bench-pingpong", daemon=True)
    t.start()
    samples: List[int] = []
    for i in range(total):
        t0 = time.perf_counter_ns()
        to_worker.put(i)
        to_main.get()
        samples.append(time.perf_counter_ns() - t0)
    to_worker.put(None)
    t.join(timeout=5)
    return _aggregate("baseline", samples[total - iters:])


def measure_syscall_mode(mode: str, iters: int) -> BenchResult:
    """Run the bench guest under the given convention in a fresh kernel."""
    from .userland import install_userland

    total = _with_warmup(iters)
    out = bytearray()
    with Kernel(default_convention=mode).boot_sync() as kernel:
        install_userland(kernel)
        proc = kernel.spawn_process(
            "/usr/bin/bench-getpid", ["bench-getpid", str(total)],
            on_stdout=lambda b: out.extend(b), feed_stdin=False,
            convention=mode)
        status = proc.wait(timeout=600)
        if status is None or status != 0:
            raise RuntimeError(f"bench guest failed: status {status}")
    samples = [int(line) for line in bytes(out).split() if line]
    if len(samples) != total:
        raise RuntimeError(f"expected {total} samples, got {len(samples)}")
    return _aggregate(mode, samples[total - iters:])


def run_bench(iters: int, modes: Optional[List[str]] = None) -> List[BenchResult]:
    modes = list(modes or MODES)
    results: Dict[str, BenchResult] = {}
    baseline = measure_baseline(iters)
    results["baseline"] = baseline
    for mode in modes:
        if mode == "baseline":
            continue
        results[mode] = measure_syscall_mode(mode, iters)
    for r in results.values():
        r.ratio = r.median_ns / baseline.median_ns if baseline.median_ns else 0.0
    return [results[m] for m in ("baseline", "async", "sync") if m in results]


def format_report(results: List[BenchResult]) -> str:
    lines = ["getpid latency (ns per call)"]
    lines += [r.human() for r in results]
    lines.append("")
    lines += [r.csv() for r in results]
    return "\n".join(lines)
