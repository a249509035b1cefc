"""Keyed, counter-based random streams.

Every stream is a ``(seed, key)`` pair.  The key is a tuple of non-negative
integers (replication, time step, player, ...) and is fed to numpy's
``SeedSequence`` as its spawn key, so two streams with the same pair always
produce the same draws no matter in which order or in which process they
are consumed.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class RngStream:
    seed: int
    key: tuple[int, ...] = ()

    def __post_init__(self):
        if self.seed < 0:
            raise ValueError("seed must be non-negative")
        if any(k < 0 for k in self.key):
            raise ValueError("stream key entries must be non-negative")

    def child(self, *key: int) -> "RngStream":
        return RngStream(self.seed, self.key + tuple(int(k) for k in key))

    def generator(self) -> np.random.Generator:
        """A fresh Philox generator positioned at the start of this stream."""
        ss = np.random.SeedSequence(self.seed, spawn_key=self.key)
        return np.random.Generator(np.random.Philox(ss))

    @property
    def stream_id(self) -> str:
        return f"{self.seed}:" + ".".join(str(k) for k in self.key)


def as_stream(rng: RngStream | int | None) -> RngStream:
    if isinstance(rng, RngStream):
        return rng
    if rng is None:
        return RngStream(0)
    return RngStream(int(rng))
