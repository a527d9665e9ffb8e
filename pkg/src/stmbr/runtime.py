"""Thread limits and named random streams."""

from __future__ import annotations

import os
import zlib

import numpy as np
from threadpoolctl import threadpool_limits

_LIMITER = None


def set_threads(n: int | None = None) -> int:
    """Cap BLAS worker threads.  ``0`` (or 1) is strict sequential mode.

    Defaults to the ``STMB_THREADS`` environment variable when ``n`` is None.
    """
    global _LIMITER
    if n is None:
        n = int(os.environ.get("STMB_THREADS", "0") or 0)
    limit = max(1, n)
    _LIMITER = threadpool_limits(limits=limit)
    return limit


def stream(seed: int, name: str) -> np.random.Generator:
    """Independent generator for one named consumer of the master seed."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), zlib.crc32(name.encode("utf-8"))]))


class RngStreams:
    """Lazily created named streams (init, dropout, shuffle, synth, ...)."""

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._streams: dict[str, np.random.Generator] = {}

    def __getitem__(self, name: str) -> np.random.Generator:
        if name not in self._streams:
            self._streams[name] = stream(self.seed, name)
        return self._streams[name]

    def __setitem__(self, name: str, gen: np.random.Generator) -> None:
        self._streams[name] = gen

    def items(self):
        return self._streams.items()
