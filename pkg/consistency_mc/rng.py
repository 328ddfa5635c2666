"""Counter-based normal streams keyed on (seed, stream, path block).

Every block of ``BLOCK_PATHS`` consecutive paths owns a Philox generator whose
key is (seed, stream) and whose counter starts at the block index, so the
draws for a given (seed, stream, path, step) never depend on how many paths
are requested, how blocks are scheduled, or how many workers fill them.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from typing import Optional

import numpy as np

from .env import get_workers


logger = logging.getLogger(__name__)

__all__ = ["BLOCK_PATHS", "STREAM_MAIN", "STREAM_CONSTANTS", "STREAM_NESTED",
           "block_generator", "nested_stream", "standard_normals"]

BLOCK_PATHS = 256
MASK64 = (1 << 64) - 1

STREAM_MAIN = 0
STREAM_CONSTANTS = 1
STREAM_NESTED = 2


def block_generator(seed: int, stream: int, block: int) -> np.random.Generator:
    """Return the generator owning path block ``block`` of (seed, stream)."""
    key = ((int(stream) & MASK64) << 64) | (int(seed) & MASK64)
    return np.random.Generator(np.random.Philox(key=key, counter=int(block) << 192))


def standard_normals(seed: int, stream: int, n_paths: int, n_steps: int,
                     workers: Optional[int] = None, start: int = 0) -> np.ndarray:
    """Draw an (n_paths, n_steps) array of independent standard normals.

    Row k holds the draws of path ``start + k``; ``start`` must be a multiple
    of ``BLOCK_PATHS`` so that chunked draws tile the full array exactly.
    """
    if start % BLOCK_PATHS:
        raise ValueError(f"start={start} is not a multiple of {BLOCK_PATHS}")
    out = np.empty((n_paths, n_steps), dtype=float)
    n_blocks = -(-n_paths // BLOCK_PATHS)
    first = start // BLOCK_PATHS

    def fill(block: int) -> None:
        lo = block * BLOCK_PATHS
        hi = min(lo + BLOCK_PATHS, n_paths)
        gen = block_generator(seed, stream, first + block)
        out[lo:hi] = gen.standard_normal((hi - lo, n_steps))

    workers = workers or get_workers()
    if workers == 1 or n_blocks == 1:
        for block in range(n_blocks):
            fill(block)
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(fill, range(n_blocks)))

    logger.debug(f"Drew {n_paths}x{n_steps} normals (seed={seed}, stream={stream}, "
                 f"blocks={n_blocks}, workers={workers})")
    return out


def nested_stream(outer: int, split: int) -> int:
    """Stream id for the inner paths spawned from outer path ``outer`` at grid index ``split``."""
    return (STREAM_NESTED << 48) | ((int(split) & 0xFFFFFF) << 24) | (int(outer) & 0xFFFFFF)
