"""Shared worker pool for the data-parallel kernels.

Kernels split their work into fixed-size groups and map a pure function over
them; results come back in submission order so reductions stay deterministic
regardless of the worker count.
"""

import threading
from collections.abc import Callable, Iterable, Sequence
from concurrent.futures import ThreadPoolExecutor
from typing import TypeVar

from .config import settings

T = TypeVar("T")
R = TypeVar("R")

_executor: ThreadPoolExecutor | None = None
_lock = threading.Lock()


def get_executor() -> ThreadPoolExecutor:
    """Process-wide pool sized by `settings.WORKER_COUNT` (GPS_THREADS)."""
    global _executor
    with _lock:
        if _executor is None:
            _executor = ThreadPoolExecutor(
                max_workers=settings.WORKER_COUNT, thread_name_prefix="gpsdf-kernel"
            )
        return _executor


def parallel_map(fn: Callable[[T], R], items: Sequence[T]) -> list[R]:
    """Map `fn` over `items` on the shared pool, preserving order.

    Must not be called from inside a pool task.
    """
    if settings.WORKER_COUNT == 1 or len(items) <= 1:
        return [fn(item) for item in items]
    return list(get_executor().map(fn, items))


def chunk_ranges(total: int, size: int) -> list[tuple[int, int]]:
    """Split `range(total)` into consecutive (start, stop) groups of `size`."""
    return [(start, min(start + size, total)) for start in range(0, total, size)]


def ordered_sum(parts: Iterable[T], initial: T) -> T:
    """Sum partial results in a fixed order."""
    total = initial
    for part in parts:
        total = total + part  # type: ignore[operator]
    return total
