"""Worker-pool helper with a deterministic, order-preserving reduction."""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Iterable, Sequence, TypeVar

T = TypeVar("T")
R = TypeVar("R")

THREADS_ENV = "CDASEG_THREADS"


def worker_count() -> int:
    """Worker cap from the CDASEG_THREADS env var; 0 or unset means auto."""
    raw = os.environ.get(THREADS_ENV, "0")
    try:
        value = int(raw)
    except ValueError:
        raise ValueError(f"{THREADS_ENV} must be an integer, got {raw!r}")
    if value < 0:
        raise ValueError(f"{THREADS_ENV} must be >= 0")
    if value == 0:
        return os.cpu_count() or 1
    return value


def map_ordered(fn: Callable[[T], R], items: Sequence[T] | Iterable[T]) -> list[R]:
    """Apply ``fn`` across items, returning results in input order."""
    items = list(items)
    workers = min(worker_count(), len(items)) or 1
    if workers <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))
