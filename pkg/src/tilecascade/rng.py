"""Deterministic randomness plumbing.

Two rules keep the whole pipeline replayable:

1. every independent consumer of randomness gets its own PCG64 stream, and
2. stream seeds are derived from readable ingredients (a global seed plus a
   few small integers or strings) through a stable hash, never from Python's
   process-salted ``hash``.

``stable_hash`` is blake2b over a length-prefixed encoding of the ingredients,
so ("a", 1) and ("a1",) cannot collide.
"""

import hashlib

import numpy as np


def stable_hash(*parts) -> int:
    """Collapse strings/ints into a stable 64-bit unsigned seed."""
    h = hashlib.blake2b(digest_size=8)
    for part in parts:
        if isinstance(part, (bool, np.bool_)):
            part = int(part)
        if isinstance(part, (int, np.integer)):
            enc = b"i" + int(part).to_bytes(16, "little", signed=True)
        elif isinstance(part, str):
            raw = part.encode("utf-8")
            enc = b"s" + len(raw).to_bytes(4, "little") + raw
        else:
            raise TypeError(f"stable_hash accepts ints and strings, got {type(part)!r}")
        h.update(len(enc).to_bytes(4, "little"))
        h.update(enc)
    return int.from_bytes(h.digest(), "little")


class NoiseStream:
    """A named, seeded source of gaussians/uniforms/integers.

    Thin wrapper over numpy's PCG64 Generator; exists so call sites say what
    the randomness is for and so substreams can be split off without sharing
    state.
    """

    def __init__(self, seed: int):
        self.seed = int(seed) & (2**64 - 1)
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    def split(self, *parts) -> "NoiseStream":
        """Derive an independent child stream keyed by *parts."""
        return NoiseStream(stable_hash(self.seed, "split", *parts))

    def normal(self, shape) -> np.ndarray:
        return self._gen.standard_normal(size=shape, dtype=np.float64)

    def uniform(self, shape=None, low=0.0, high=1.0):
        return self._gen.uniform(low, high, size=shape)

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def choice(self, seq):
        return seq[int(self._gen.integers(len(seq)))]
