"""Reproducible randomness.

Two mechanisms, both counter based so that results never depend on draw
order or thread count:

* ``keyed_uniforms`` hashes ``(seed, stream, cell coordinates)`` with the
  SplitMix64 finalizer.  A cell's value depends only on its coordinates, so
  growing a box extends a realization instead of resampling it.
* ``chunk_rng`` derives the generator for replication chunk ``c`` of stream
  ``s`` as ``Philox(SeedSequence(master_seed, spawn_key=(s, c)))``.  Chunks
  have a fixed size that depends on the field size only; ``replicate`` maps
  them over a thread pool and concatenates results in chunk order.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Sequence

import numpy as np

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_AXIS_SALT = np.array(
    [0x632BE59BD9B4E019, 0x85157AF5A5B0C3E1, 0xD6E8FEB86659FD93, 0xA0761D6478BD642F,
     0xE7037ED1A0B428DB, 0x8EBC6AF09C88C6E3, 0x589965CC75374CC3, 0x1D8E4E27C47D124F,
     0xC2B2AE3D27D4EB4F],
    dtype=np.uint64,
)

CELLS_PER_CHUNK = 1 << 20
MAX_CHUNK_REPS = 4096


def mix64(z):
    """SplitMix64 finalizer on uint64 arrays (wrapping arithmetic)."""
    z = np.asarray(z, dtype=np.uint64)
    with np.errstate(over="ignore"):
        z = (z ^ (z >> np.uint64(30))) * _M1
        z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


def _key(seed: int, stream: int) -> np.ndarray:
    base = np.array([seed & 0xFFFFFFFFFFFFFFFF], dtype=np.uint64)
    with np.errstate(over="ignore"):
        return mix64(mix64(base) + np.uint64(stream) * _GOLDEN + _GOLDEN)


def keyed_bits(seed: int, stream: int, starts: Sequence[int], shape: Sequence[int]) -> np.ndarray:
    """64 random bits per cell of the block ``starts + [0, shape)`` (0-based coordinates)."""
    h = _key(seed, stream).reshape((1,) * len(shape))
    with np.errstate(over="ignore"):
        for axis, (start, length) in enumerate(zip(starts, shape)):
            coord = np.arange(start, start + length, dtype=np.uint64) + np.uint64(1)
            view = [1] * len(shape)
            view[axis] = length
            h = mix64(h ^ (coord.reshape(view) * _AXIS_SALT[axis]))
    return mix64(h + _GOLDEN)


def keyed_uniforms(seed: int, stream: int, starts: Sequence[int], shape: Sequence[int]) -> np.ndarray:
    """Uniforms in the open interval (0, 1) keyed by cell coordinate."""
    bits = keyed_bits(seed, stream, starts, shape)
    return ((bits >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0**-53


def chunk_rng(master_seed: int, stream: int, chunk: int) -> np.random.Generator:
    ss = np.random.SeedSequence(int(master_seed), spawn_key=(int(stream), int(chunk)))
    return np.random.Generator(np.random.Philox(ss))


def chunk_size(cells: int) -> int:
    return int(max(1, min(MAX_CHUNK_REPS, CELLS_PER_CHUNK // max(1, cells))))


def default_threads() -> int:
    env = os.environ.get("NA_LATTICE_THREADS")
    if env:
        return max(1, int(env))
    return 1


def replicate(
    fn: Callable[[np.random.Generator, int], dict[str, np.ndarray]],
    reps: int,
    master_seed: int,
    stream: int,
    cells: int,
    threads: int | None = None,
) -> dict[str, np.ndarray]:
    """Run ``fn(rng, n)`` over fixed-size replication chunks and concatenate.

    ``fn`` returns a dict of per-replication arrays.  Output is identical for
    every thread count.
    """
    if reps < 1:
        raise ValueError("reps must be >= 1")
    size = chunk_size(cells)
    bounds = [(c, min(size, reps - c * size)) for c in range((reps + size - 1) // size)]

    def run(item):
        c, n = item
        return fn(chunk_rng(master_seed, stream, c), n)

    threads = default_threads() if threads is None else max(1, int(threads))
    if threads == 1 or len(bounds) == 1:
        parts = [run(b) for b in bounds]
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(run, bounds))
    return {key: np.concatenate([p[key] for p in parts]) for key in parts[0]}
