"""Order-preserving process-pool map used behind ``--jobs``."""

from __future__ import annotations

import multiprocessing as mp
from concurrent.futures import ProcessPoolExecutor
from typing import Callable, Iterable, TypeVar

import torch

T = TypeVar("T")
R = TypeVar("R")


def _single_thread() -> None:
    torch.set_num_threads(1)


def ordered_map(fn: Callable[[T], R], items: Iterable[T], jobs: int = 1) -> list[R]:
    """``[fn(x) for x in items]``, optionally spread over ``jobs`` worker processes.

    Results come back in input order whatever the job count. ``fn`` must be
    picklable (a module-level function or a ``functools.partial`` of one).
    """
    items = list(items)
    if jobs < 1:
        raise ValueError(f"jobs must be >= 1, got {jobs}")
    if jobs == 1 or len(items) < 2:
        return [fn(x) for x in items]
    chunk = max(1, len(items) // (4 * jobs))
    with ProcessPoolExecutor(jobs, mp_context=mp.get_context("fork"), initializer=_single_thread) as pool:
        return list(pool.map(fn, items, chunksize=chunk))
