"""Counter-based random streams built on Philox.

Every stream is addressed by a hierarchical key (a tuple of strings/ints).
The key is hashed into a 128-bit Philox key, so any two distinct key paths
yield statistically independent streams and a stream's output never depends
on how many draws other streams made.  This is what makes generation
replayable bit-for-bit and independent of thread scheduling.
"""

from __future__ import annotations

import hashlib

import numpy as np

_SEP = b"\x1f"


def _pack(parts: tuple) -> bytes:
    chunks = []
    for p in parts:
        if isinstance(p, bytes):
            chunks.append(b"b" + p)
        elif isinstance(p, str):
            chunks.append(b"s" + p.encode("utf-8"))
        elif isinstance(p, (int, np.integer)):
            chunks.append(b"i" + str(int(p)).encode("ascii"))
        else:
            raise TypeError(f"rng key part must be str/int/bytes, got {type(p).__name__}")
    return _SEP.join(chunks)


class StreamKey:
    """Immutable address of one random stream."""

    __slots__ = ("parts",)

    def __init__(self, *parts):
        self.parts = tuple(parts)

    def child(self, *parts) -> "StreamKey":
        return StreamKey(*self.parts, *parts)

    def philox_key(self) -> np.ndarray:
        digest = hashlib.blake2b(_pack(self.parts), digest_size=16).digest()
        return np.frombuffer(digest, dtype=np.uint64).copy()

    def generator(self) -> np.random.Generator:
        return np.random.Generator(np.random.Philox(key=self.philox_key()))

    def uniforms(self, n: int) -> np.ndarray:
        """n doubles in [0, 1); draw i is a pure function of (key, i)."""
        return self.generator().random(n)

    def normals(self, shape, scale=1.0) -> np.ndarray:
        return self.generator().normal(0.0, scale, size=shape)

    def integers(self, low: int, high: int, size=None) -> np.ndarray:
        return self.generator().integers(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self.generator().permutation(n)

    def __repr__(self):
        return "StreamKey(" + ", ".join(repr(p) for p in self.parts) + ")"

    def __eq__(self, other):
        return isinstance(other, StreamKey) and self.parts == other.parts

    def __hash__(self):
        return hash(self.parts)
