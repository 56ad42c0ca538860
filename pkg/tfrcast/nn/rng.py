"""
Seeded, splittable random streams.

A stream is a 64-bit seed plus a draw counter on top of numpy's PCG64 bit
generator, whose output for a given seed is fixed across platforms. Child
streams are derived by hashing the parent seed with a label, so every module
draws from its own stream while one ``--seed`` controls the whole run.
"""

import hashlib

import numpy as np

_MASK64 = (1 << 64) - 1


def derive_seed(seed: int, label: str) -> int:
    """64-bit child seed: first 8 bytes (big-endian) of sha256("<seed>/<label>")."""
    digest = hashlib.sha256(f"{seed & _MASK64}/{label}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big")


class RngStream:
    """Deterministic random source; ``counter`` counts the values drawn so far."""

    def __init__(self, seed: int):
        self.seed = int(seed) & _MASK64
        self.counter = 0
        self._generator = np.random.Generator(np.random.PCG64(self.seed))

    def __repr__(self) -> str:
        return f"RngStream(seed={self.seed}, counter={self.counter})"

    def split(self, label: str) -> "RngStream":
        """Independent child stream named by ``label``; does not advance self."""
        return RngStream(derive_seed(self.seed, label))

    def uniform(self, low=0.0, high=1.0, size=None):
        self.counter += int(np.prod(size)) if size is not None else 1
        return self._generator.uniform(low, high, size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        self.counter += int(np.prod(size)) if size is not None else 1
        return self._generator.normal(loc, scale, size)

    def integers(self, low, high=None, size=None):
        self.counter += int(np.prod(size)) if size is not None else 1
        return self._generator.integers(low, high, size)

    def permutation(self, n: int) -> np.ndarray:
        self.counter += n
        return self._generator.permutation(n)

    def choice(self, options):
        """Pick one element of a sequence uniformly."""
        return options[int(self.integers(0, len(options)))]

    def random(self) -> float:
        """One uniform draw in [0, 1)."""
        return float(self.uniform())
