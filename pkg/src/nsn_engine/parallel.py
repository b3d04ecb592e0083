# src/nsn_engine/parallel.py
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor, as_completed
from typing import Callable, Iterable, Sequence, TypeVar

T = TypeVar("T")
R = TypeVar("R")


def ordered_map(fn: Callable[[T], R], items: Iterable[T], jobs: int = 1) -> list[R]:
    """
    Apply fn to every item with up to `jobs` worker threads.
    Results come back in input order whatever the completion order was.
    Exceptions propagate; callers that want per-item isolation catch inside fn.
    """
    seq: Sequence[T] = list(items)
    if jobs <= 1 or len(seq) <= 1:
        return [fn(x) for x in seq]

    results: list[R | None] = [None] * len(seq)
    with ThreadPoolExecutor(max_workers=jobs) as ex:
        futures = {ex.submit(fn, x): i for i, x in enumerate(seq)}
        for fut in as_completed(futures):
            results[futures[fut]] = fut.result()
    return results  # type: ignore[return-value]
