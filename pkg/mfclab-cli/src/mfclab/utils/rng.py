"""
Counter-based random streams.

Every draw is addressed by (master seed, stream tag, particle index, step), so
results never depend on how particles are scheduled across workers or on how
many particles a run has.
"""

from functools import lru_cache

import numpy as np

STREAMS = ("initial", "noise", "probe", "optimizer", "subsample", "reference")


def stream_key(seed: int, stream: str) -> int:
    """Derives the first Philox key word from the master seed and a stream tag."""
    if stream not in STREAMS:
        raise ValueError(f"Unknown random stream '{stream}'")
    if seed < 0:
        raise ValueError(f"Seeds must be non-negative, got {seed}")
    tag = STREAMS.index(stream)
    return int(np.random.SeedSequence([int(seed), tag]).generate_state(1, dtype=np.uint64)[0])


def generator(seed: int, stream: str, index: int = 0) -> np.random.Generator:
    """A Philox generator for one (seed, stream, index) cell."""
    key = np.array([stream_key(seed, stream), int(index)], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


@lru_cache(maxsize=16)
def _normal_block_cached(seed: int, stream: str, particles: tuple, steps: int, dim: int) -> np.ndarray:
    out = np.empty((len(particles), steps, dim))
    for row, pid in enumerate(particles):
        out[row] = generator(seed, stream, pid).standard_normal((steps, dim))
    out.setflags(write=False)
    return out


def normal_block(seed: int, stream: str, particles, steps: int, dim: int) -> np.ndarray:
    """
    Standard normal draws of shape (len(particles), steps, dim).

    Row i is the first ``steps * dim`` draws of particle ``particles[i]``'s
    stream, so a prefix of particles or steps always sees the same numbers.
    The returned array is read-only and may be shared between callers.
    """
    ids = tuple(int(p) for p in np.asarray(particles).ravel())
    return _normal_block_cached(int(seed), stream, ids, int(steps), int(dim))


def uniform_block(seed: int, stream: str, particles, dim: int) -> np.ndarray:
    """Uniform [0, 1) draws of shape (len(particles), dim), one row per particle stream."""
    ids = [int(p) for p in np.asarray(particles).ravel()]
    out = np.empty((len(ids), dim))
    for row, pid in enumerate(ids):
        out[row] = generator(seed, stream, pid).random(dim)
    return out
