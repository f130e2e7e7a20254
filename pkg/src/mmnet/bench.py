"""Single-thread latency benchmark harness.

Mirrors the measurement protocol used for the reported numbers: a fixed
random input, warmup runs excluded, then the mean and standard deviation
of the wall-clock time over (by default) 100 timed inference runs on one
thread. Only the inference call sits inside the timed window; model
loading and any encoding/decoding are outside it.
"""

from __future__ import annotations

import statistics
import time
from dataclasses import dataclass, field
from typing import Callable, List

import numpy as np


@dataclass
class BenchReport:
    runs: int
    warmup: int
    threads: int
    times_ms: List[float]
    mean_ms: float
    std_ms: float
    config: dict = field(default_factory=dict)

    def format(self) -> str:
        lines = [
            f"runs={self.runs} warmup={self.warmup} threads={self.threads}",
            f"mean_ms={self.mean_ms:.3f} std_ms={self.std_ms:.3f}",
        ]
        for k, v in sorted(self.config.items()):
            lines.append(f"{k}={v}")
        return "\n".join(lines)


def run_benchmark(
    infer: Callable[[np.ndarray], np.ndarray],
    input_shape,
    runs: int = 100,
    warmup: int = 10,
    threads: int = 1,
    allow_multithread: bool = False,
    seed: int = 0,
    config: dict | None = None,
) -> BenchReport:
    """Time `infer` on a fixed random input.

    The engine itself is single-threaded; requesting more threads is
    refused unless explicitly allowed, matching the single-thread
    measurement contract.
    """
    if threads != 1 and not allow_multithread:
        raise ValueError(
            "benchmark contract is single-thread; pass allow_multithread to override"
        )
    if runs < 1 or warmup < 0:
        raise ValueError("runs must be >= 1 and warmup >= 0")
    rng = np.random.default_rng(seed)
    x = rng.random(input_shape, dtype=np.float32)

    for _ in range(warmup):
        infer(x)
    times = []
    for _ in range(runs):
        t0 = time.perf_counter()
        infer(x)
        t1 = time.perf_counter()
        times.append((t1 - t0) * 1000.0)

    mean = statistics.fmean(times)
    std = statistics.pstdev(times)  # over the timed runs only
    return BenchReport(
        runs=runs,
        warmup=warmup,
        threads=threads,
        times_ms=times,
        mean_ms=mean,
        std_ms=std,
        config=config or {},
    )
