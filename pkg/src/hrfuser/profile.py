"""Operation counting and wall-clock profiling."""

from __future__ import annotations

import time
from collections import defaultdict
from typing import Callable

from hrfuser import tensor as T


def count_flops_of(fn: Callable[[], object]) -> float:
    """Total floating-point operations of one call of ``fn`` (no graph is kept)."""
    total = 0.0

    def hook(kind, amount):
        nonlocal total
        total += amount

    with T.no_grad(), T.flop_hook(hook):
        fn()
    return total


def flops_by_kind(fn: Callable[[], object]) -> dict[str, float]:
    counts: dict[str, float] = defaultdict(float)

    def hook(kind, amount):
        counts[kind] += amount

    with T.no_grad(), T.flop_hook(hook):
        fn()
    return dict(counts)


def time_call(fn: Callable[[], object], repeats: int = 3) -> float:
    """Best-of-``repeats`` wall time in seconds."""
    best = float("inf")
    for _ in range(repeats):
        start = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - start)
    return best
