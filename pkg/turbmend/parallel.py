import os
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Iterable, TypeVar

from rich.progress import track

T = TypeVar("T")
R = TypeVar("R")

_max_workers: int | None = None


def set_max_workers(workers: int | None) -> None:
    """Cap the worker count used by every parallel stage. None or 0 means one per CPU."""
    global _max_workers
    _max_workers = workers or None


def get_max_workers() -> int:
    return _max_workers or os.cpu_count() or 1


def ordered_map(func: Callable[[T], R], items: Iterable[T], description: str | None = None) -> list[R]:
    """Apply func to every item on the shared pool, returning results in input order.

    Args:
        func: Worker function; must not mutate shared inputs.
        items: Work items.
        description: When given, a rich progress bar with this label is shown.

    Returns:
        list of results, position i belonging to item i.
    """
    items = list(items)
    workers = min(get_max_workers(), max(len(items), 1))
    if workers == 1:
        iterator = track(items, description=description) if description else items
        return [func(item) for item in iterator]
    with ThreadPoolExecutor(max_workers=workers) as executor:
        futures = [executor.submit(func, item) for item in items]
        if description:
            futures_iter = track(futures, description=description)
        else:
            futures_iter = futures
        return [future.result() for future in futures_iter]
