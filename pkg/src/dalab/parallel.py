"""Deterministic chunked execution.

Work is cut into chunks whose boundaries depend only on the item count and
the chunk size, never on the worker count, and results are concatenated in
chunk order.  Combined with per-index random streams this makes every
reduction independent of how many processes ran.
"""
from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor
from typing import Callable, Sequence

import numpy as np

WORKERS_ENV = "DALAB_WORKERS"


def default_workers() -> int:
    env = os.environ.get(WORKERS_ENV)
    if env:
        try:
            n = int(env)
        except ValueError as exc:
            raise ValueError(f"{WORKERS_ENV} must be a positive integer, got {env!r}") from exc
        if n < 1:
            raise ValueError(f"{WORKERS_ENV} must be a positive integer, got {env!r}")
        return n
    return os.cpu_count() or 1


def chunk_bounds(n_items: int, chunk_size: int) -> list[tuple[int, int]]:
    return [(a, min(a + chunk_size, n_items)) for a in range(0, n_items, chunk_size)]


def chunked_map(
    func: Callable, n_items: int, chunk_size: int, args: Sequence = (), workers: int | None = None
) -> list:
    """Call ``func(start, stop, *args)`` for every chunk and return results in chunk order."""
    bounds = chunk_bounds(n_items, chunk_size)
    workers = default_workers() if workers is None else int(workers)
    if workers <= 1 or len(bounds) <= 1:
        return [func(a, b, *args) for a, b in bounds]
    with ProcessPoolExecutor(max_workers=min(workers, len(bounds))) as pool:
        futures = [pool.submit(func, a, b, *args) for a, b in bounds]
        return [fut.result() for fut in futures]


def concat(results: list) -> np.ndarray:
    return np.concatenate(results, axis=0) if results else np.empty((0,))
