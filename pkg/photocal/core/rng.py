"""Counter-based random streams for reproducible parallel Monte Carlo."""

from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Iterable, List, TypeVar

import numpy as np

T = TypeVar("T")
R = TypeVar("R")


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    """
    Philox generator for the substream keyed by ``stream`` of run ``seed``.

    Keys are tuples such as (repeat, pass, batch); distinct keys give
    independent streams regardless of the order they are consumed in.
    """
    sequence = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(s) for s in stream))
    return np.random.Generator(np.random.Philox(sequence))


def batch_sizes(total: int, batch: int) -> List[int]:
    """Split ``total`` slots into batches of at most ``batch``."""
    if total <= 0:
        return []
    full, rest = divmod(int(total), int(batch))
    sizes = [int(batch)] * full
    if rest:
        sizes.append(rest)
    return sizes


def parallel_map(fn: Callable[[T], R], jobs: Iterable[T], threads: int = 1) -> List[R]:
    """Ordered map over ``jobs`` on at most ``threads`` workers."""
    jobs = list(jobs)
    if threads <= 1 or len(jobs) <= 1:
        return [fn(job) for job in jobs]
    with ThreadPoolExecutor(max_workers=min(threads, len(jobs))) as pool:
        return list(pool.map(fn, jobs))
