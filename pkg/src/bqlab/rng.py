"""Counter-based noise streams.

Each (master_seed, stream_index) pair owns an independent Philox stream, and
the draws for step k are generated from a counter block derived from k alone.
Consequently the increments consumed by a trajectory depend only on
(master_seed, stream_index, step index): ensembles can be re-partitioned
across workers and runs can be checkpointed/resumed without perturbing any
stream.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class NoiseIncrement:
    """Brownian increments of the four forcing directions over one step."""

    dw: np.ndarray  # shape (4,), Var(dw_i) = dt
    dt: float


# steps per counter block; part of the stream protocol, do not change casually:
# the draws for step k always come from row k % BLOCK of block k // BLOCK.
BLOCK = 512


class NoiseStream:
    """Deterministic per-step Gaussian draws backed by counter-mode Philox.

    Step k consumes row k % BLOCK of the Gaussian block generated from the
    Philox counter block k // BLOCK, so the draws are a pure function of
    (master_seed, stream_index, step): independent of chunking, ensemble
    partitioning, or checkpoint/restore position.
    """

    def __init__(self, master_seed: int, stream_index: int = 0):
        self.master_seed = int(master_seed) & (2**64 - 1)
        self.stream_index = int(stream_index) & (2**64 - 1)
        self._base = np.random.Philox(
            counter=[0, 0, 0, 0], key=[self.master_seed, self.stream_index]
        )
        self._cached_block = -1
        self._cache: np.ndarray | None = None

    def _block(self, index: int) -> np.ndarray:
        if index != self._cached_block:
            gen = np.random.Generator(self._base.jumped(index + 1))
            self._cache = gen.standard_normal((BLOCK, 4))
            self._cached_block = index
        return self._cache

    def normals(self, step: int, count: int = 4) -> np.ndarray:
        """Standard normals for a given step index; pure function of the key."""
        if count > 4:
            raise ValueError("per-step draws are limited to 4; use generator() for setup draws")
        return self._block(step // BLOCK)[step % BLOCK, :count].copy()

    def generator(self, tag: int = 0) -> np.random.Generator:
        """Auxiliary generator for setup draws; counter region disjoint from steps."""
        return np.random.Generator(self._base.jumped(2**32 + int(tag)))

    def increment(self, step: int, dt: float) -> NoiseIncrement:
        return NoiseIncrement(dw=self.normals(step) * np.sqrt(dt), dt=dt)

    def child(self, stream_index: int) -> "NoiseStream":
        return NoiseStream(self.master_seed, stream_index)
