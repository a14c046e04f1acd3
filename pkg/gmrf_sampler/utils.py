import asyncio

from pathlib import Path
from typing import Callable, Iterable, List, TypeVar

import numpy as np
import pandas as pd


T = TypeVar("T")
R = TypeVar("R")


def random_stream(seed: int, *key: int) -> np.random.Generator:
    """Return the generator for substream `key` of `seed`.

    Substreams are addressed by position (probe index, colour class, chain
    id, ...) so serial and threaded runs draw bit-identical numbers.
    """
    sequence = np.random.SeedSequence(seed, spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.PCG64(sequence))


def rademacher(rng: np.random.Generator, size: int) -> np.ndarray:
    return rng.integers(0, 2, size=size).astype(float) * 2.0 - 1.0


async def gather_in_threads(
    fn: Callable[[T], R], items: Iterable[T], *, threads: int = 1
) -> List[R]:
    """Run `fn` over `items` in worker threads, preserving input order."""
    semaphore = asyncio.Semaphore(max(1, threads))

    async def _run(item: T) -> R:
        async with semaphore:
            return await asyncio.to_thread(fn, item)

    return list(await asyncio.gather(*(_run(item) for item in items)))


def map_in_threads(
    fn: Callable[[T], R], items: Iterable[T], *, threads: int = 1
) -> List[R]:
    """Synchronous front end for gather_in_threads; serial when threads <= 1."""
    items = list(items)
    if threads <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    return asyncio.run(gather_in_threads(fn, items, threads=threads))


def write_grid_csv(path: Path | str, grid: np.ndarray) -> None:
    """Write a 2-D array row-major with a header row of column indices."""
    grid = np.atleast_2d(np.asarray(grid, dtype=float))
    pd.DataFrame(grid).to_csv(path, index=False)


def read_grid_csv(path: Path | str) -> np.ndarray:
    return pd.read_csv(path).to_numpy(dtype=float)


def write_vector_csv(path: Path | str, values: np.ndarray, column: str = "value") -> None:
    pd.DataFrame({column: np.asarray(values, dtype=float)}).to_csv(path, index=False)


__all__ = [
    "random_stream",
    "rademacher",
    "gather_in_threads",
    "map_in_threads",
    "write_grid_csv",
    "read_grid_csv",
    "write_vector_csv",
]
