"""Order-preserving parallel map used by the dataset-level drivers."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Iterable, TypeVar

A = TypeVar("A")
B = TypeVar("B")


def ordered_map(fn: Callable[[A], B], items: Iterable[A], workers: int = 1) -> list[B]:
    """``[fn(x) for x in items]``, optionally spread over threads.

    Results come back in input order, so any later reduction is independent
    of the worker count. numpy releases the GIL inside BLAS calls, which is
    where the forward pass spends its time.
    """
    items = list(items)
    if workers <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))
