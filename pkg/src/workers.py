"""
Ordered parallel map used for per-frame and per-sequence work.

threads=1 runs inline, which is the deterministic mode.
"""

from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Iterable, TypeVar

T = TypeVar("T")
R = TypeVar("R")


def parallel_map(fn: Callable[[T], R], items: Iterable[T], threads: int = 1) -> list[R]:
    """
    Apply fn to every item, preserving input order.

    Args:
        fn: Pure function to apply.
        items: Inputs.
        threads: Worker count; 1 means run in the calling thread.

    Returns:
        Results in the same order as items.
    """
    items = list(items)
    if threads <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))
