"""
streams.py.

Seeded random substreams and the replication pool.

Every random draw in the toolkit comes from a counter-based Philox generator
whose `SeedSequence` is keyed by the master seed, a stream tag and the
indices that identify the draw (replication, area, ...). A draw therefore
does not depend on the order or the process in which it is made, which is
what keeps studies identical across worker counts.

Functions
---------
substream(seed, tag, *keys) -> numpy.random.Generator
    Independent generator for one keyed stream.
run_replications(func, tasks, workers) -> list
    Ordered map over replications, optionally in worker processes.
"""

import logging
from collections.abc import Callable, Iterable, Sequence
from concurrent.futures import ProcessPoolExecutor
from enum import IntEnum
from typing import TypeVar

import numpy as np
from numpy.random import Generator, Philox, SeedSequence

logger = logging.getLogger(__name__)

T = TypeVar("T")
R = TypeVar("R")

SEED_MASK = (1 << 64) - 1


class Stream(IntEnum):
    """Stream tags; one per independent source of randomness."""

    SAMPLE = 1
    POPULATION = 2
    TREATMENT = 3
    OUTCOME = 4
    PARAMETRIC_BOOT = 5
    BLOCK_BOOT = 6
    STUDY = 7
    DESIGN = 8


def substream(seed: int, tag: int, *keys: int) -> Generator:
    """
    Build the generator of one keyed stream.

    Parameters
    ----------
    seed : int
        Master seed; reduced to 64 bits.
    tag : int
        Stream tag, usually a `Stream` member.
    *keys : int
        Further non-negative indices (replication, area, ...).

    Returns
    -------
    numpy.random.Generator
        Philox-backed generator.

    Example
    -------
    >>> a = substream(42, Stream.SAMPLE, 3).random()
    >>> b = substream(42, Stream.SAMPLE, 3).random()
    >>> a == b
    True
    """
    spawn_key = (int(tag), *(int(key) for key in keys))
    return Generator(Philox(SeedSequence(int(seed) & SEED_MASK, spawn_key=spawn_key)))


def child_seed(seed: int, tag: int, *keys: int) -> int:
    """Derive a 64-bit seed for a nested procedure from a keyed stream."""
    state = SeedSequence(int(seed) & SEED_MASK, spawn_key=(int(tag), *keys))
    return int(state.generate_state(1, dtype=np.uint64)[0])


def run_replications(
    func: Callable[[T], R], tasks: Iterable[T], workers: int = 1
) -> list[R]:
    """
    Apply `func` to every task and return results in task order.

    Parameters
    ----------
    func : Callable
        Picklable top-level function when `workers` > 1.
    tasks : Iterable
        Task payloads; each must carry whatever keys its substreams need.
    workers : int, default 1
        Worker processes; 1 runs inline.

    Returns
    -------
    list
        One result per task, in input order.
    """
    items: Sequence[T] = list(tasks)
    if workers <= 1 or len(items) <= 1:
        return [func(item) for item in items]
    logger.info(
        "starting replication pool", extra={"workers": workers, "tasks": len(items)}
    )
    chunksize = max(1, len(items) // (4 * workers))
    with ProcessPoolExecutor(max_workers=workers) as executor:
        return list(executor.map(func, items, chunksize=chunksize))
