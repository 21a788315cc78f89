"""Deterministic randomness with named child streams.

Every stochastic operation in the library draws from its own named stream
derived from (seed, path-of-labels). Streams are backed by counter-based
Philox generators keyed by a SHA-256 of the path, so reordering independent
operations can never perturb each other's draws, and distinct labels never
collide.
"""

from __future__ import annotations

import hashlib

import numpy as np


class Rng:
    __slots__ = ("seed", "path")

    def __init__(self, seed: int, path: tuple[str, ...] = ()):
        self.seed = int(seed)
        self.path = tuple(path)

    def child(self, label: str) -> "Rng":
        return Rng(self.seed, self.path + (str(label),))

    def generator(self) -> np.random.Generator:
        """A fresh Generator for this stream; always starts at the same state."""
        raw = f"{self.seed}/" + "/".join(self.path)
        digest = hashlib.sha256(raw.encode("utf-8")).digest()
        key = np.frombuffer(digest[:16], dtype=np.uint64)
        return np.random.Generator(np.random.Philox(key=key))

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed}, path={'/'.join(self.path)!r})"
