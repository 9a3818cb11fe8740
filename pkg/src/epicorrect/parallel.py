"""Worker-count control shared by the column-parallel kernels.

Column tasks never share mutable state and each chunk writes a disjoint
slice of the output, so results do not depend on the thread count.
"""
from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor

import numpy as np

_THREADS = max(1, int(os.environ.get("EPICORRECT_THREADS", "1")))


def set_threads(n: int) -> None:
    global _THREADS
    if int(n) < 1:
        raise ValueError("thread count must be >= 1")
    _THREADS = int(n)


def get_threads() -> int:
    return _THREADS


def chunk_bounds(n_items: int, n_chunks: int):
    n_chunks = max(1, min(n_chunks, n_items))
    edges = np.linspace(0, n_items, n_chunks + 1).astype(int)
    return list(zip(edges[:-1], edges[1:]))


def run_chunked(func, n_items: int, min_chunk: int = 64):
    """Call ``func(start, stop)`` over a partition of ``range(n_items)``.

    With more than one thread the chunks run on a thread pool; ``func`` is
    expected to release the GIL (numba ``nogil`` kernels do).
    """
    threads = get_threads()
    n_chunks = 1 if threads == 1 else min(4 * threads, max(1, n_items // min_chunk))
    bounds = chunk_bounds(n_items, n_chunks)
    if len(bounds) == 1:
        return [func(*bounds[0])]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(lambda se: func(*se), bounds))
