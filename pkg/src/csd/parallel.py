"""Worker-count control and order-preserving parallel map.

Results land in preassigned slots and every reduction downstream runs in a
fixed order, so the worker count never changes numerical output. CSD_THREADS
caps the pool; unset means machine parallelism.
"""
from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Sequence


def max_workers() -> int:
    raw = os.environ.get("CSD_THREADS")
    if raw is None:
        return os.cpu_count() or 1
    try:
        n = int(raw)
    except ValueError:
        raise ValueError(f"CSD_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise ValueError(f"CSD_THREADS must be >= 1, got {n}")
    return n


def map_indexed(fn: Callable, items: Sequence, workers: int | None = None) -> list:
    """[fn(item) for item in items], slot-assigned, optionally threaded."""
    items = list(items)
    if workers is None:
        workers = max_workers()
    if workers <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    results = [None] * len(items)

    def run(i: int) -> None:
        results[i] = fn(items[i])

    with ThreadPoolExecutor(max_workers=min(workers, len(items))) as pool:
        list(pool.map(run, range(len(items))))
    return results
