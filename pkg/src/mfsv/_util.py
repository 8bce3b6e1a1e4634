"""Low-level numeric and RNG helpers.

Sequential first-order recursions are routed through ``scipy.signal.lfilter``
so that simulation and score evaluation run at C speed on batched arrays.
Random streams are derived from ``numpy.random.SeedSequence`` spawn keys,
which makes every parallel decomposition reproducible regardless of
scheduling.
"""

from __future__ import annotations

from typing import Iterable, Sequence, Union

import numpy as np
from scipy.signal import lfilter

SeedLike = Union[int, np.random.SeedSequence]


def ar1_recursion(coef: float, innovations: np.ndarray, init: np.ndarray | float) -> np.ndarray:
    """Run y[t] = coef * y[t-1] + innovations[t] along the last axis.

    ``init`` is y[-1], the value carried into the first step; it must
    broadcast against the leading dimensions of ``innovations``.
    """
    w = np.asarray(innovations, dtype=float)
    if w.ndim == 0:
        raise ValueError("innovations must have a time axis")
    zi = np.broadcast_to(np.asarray(coef * init, dtype=float)[..., None], w.shape[:-1] + (1,))
    out, _ = lfilter([1.0], [1.0, -coef], w, axis=-1, zi=np.ascontiguousarray(zi))
    return out


def spawn_seed(seed: SeedLike, *key: int) -> np.random.SeedSequence:
    """Deterministic child seed addressed by an integer key path."""
    if isinstance(seed, np.random.SeedSequence):
        base_entropy = seed.entropy
        base_key = tuple(seed.spawn_key)
    else:
        base_entropy = seed
        base_key = ()
    return np.random.SeedSequence(entropy=base_entropy, spawn_key=base_key + tuple(key))


def rng_from(seed: SeedLike, *key: int) -> np.random.Generator:
    if key:
        seed = spawn_seed(seed, *key)
    return np.random.default_rng(seed)


def chunked(total: int, chunk: int) -> Iterable[tuple[int, int]]:
    """Yield (start, stop) pairs covering range(total) in blocks of ``chunk``."""
    start = 0
    while start < total:
        stop = min(start + chunk, total)
        yield start, stop
        start = stop


def as_float_array(x: Sequence[float] | np.ndarray, name: str) -> np.ndarray:
    arr = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite entries")
    return arr


def frozen(arr: np.ndarray) -> np.ndarray:
    """Defensive read-only copy, used by immutable value objects."""
    out = np.array(arr, dtype=float, copy=True)
    out.setflags(write=False)
    return out
