"""Counter-based, label-splittable random streams.

Every stream is keyed by ``(root_seed, label)``. Output ``i`` is the SplitMix64
finalizer applied to ``key + (i + 1) * GOLDEN``, so a draw depends only on the
key and its position; nothing is shared between streams.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

ALGORITHM = "splitmix64-counter+box-muller"

_MASK64 = (1 << 64) - 1
_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_INV_2_53 = 1.0 / float(1 << 53)


def _mix(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * _M1
    z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


def _mix_int(x: int) -> int:
    return int(_mix(np.array([x & _MASK64], dtype=np.uint64))[0])


def _label_hash(label: str) -> int:
    return int.from_bytes(hashlib.blake2b(label.encode("utf-8"), digest_size=8).digest(), "little")


@dataclass
class RngStream:
    """A single-owner random stream. ``counter`` counts 64-bit words consumed."""

    root_seed: int
    stream_label: str
    counter: int = 0
    key: int = field(init=False, repr=False)

    def __post_init__(self):
        if not self.stream_label:
            raise ValueError("stream label must be nonempty")
        if not 0 <= self.root_seed <= _MASK64:
            raise ValueError(f"root_seed must be a 64-bit unsigned integer, got {self.root_seed}")
        self.key = _mix_int(_mix_int(self.root_seed) ^ _label_hash(self.stream_label))

    def _words(self, count: int) -> np.ndarray:
        idx = np.arange(self.counter + 1, self.counter + 1 + count, dtype=np.uint64)
        self.counter += count
        return _mix(np.uint64(self.key) + idx * _GOLDEN)

    def uniform(self, size=None):
        """Doubles in [0, 1) with 53 random bits each."""
        count = int(np.prod(size)) if size is not None else 1
        u = (self._words(count) >> np.uint64(11)).astype(np.float64) * _INV_2_53
        return float(u[0]) if size is None else u.reshape(size)

    def normal(self, size=None):
        """Standard normals via Box-Muller on consecutive word pairs.

        Each pair of outputs costs two words, so even-sized draws compose:
        ``normal(4)`` then ``normal(6)`` equals ``normal(10)``. An odd count
        discards the last sine output.
        """
        count = int(np.prod(size)) if size is not None else 1
        pairs = (count + 1) // 2
        u = self.uniform(2 * pairs)
        u1 = 1.0 - u[0::2]  # (0, 1], keeps log finite
        u2 = u[1::2]
        r = np.sqrt(-2.0 * np.log(u1))
        theta = 2.0 * np.pi * u2
        z = np.empty(2 * pairs)
        z[0::2] = r * np.cos(theta)
        z[1::2] = r * np.sin(theta)
        z = z[:count]
        return float(z[0]) if size is None else z.reshape(size)

    def integers(self, high: int, size=None):
        """Uniform integers in [0, high)."""
        u = self.uniform(size)
        return int(u * high) if size is None else np.floor(u * high).astype(np.int64)

    def spawn(self, label: str) -> RngStream:
        """A child stream keyed on this stream's seed and a composite label."""
        return derive_stream(self.root_seed, f"{self.stream_label}/{label}")


def derive_stream(root_seed: int, label: str) -> RngStream:
    return RngStream(int(root_seed), label)


def next_gaussian(s: RngStream) -> float:
    return s.normal()


def metadata(root_seed: int, labels) -> dict:
    return {"root_seed": int(root_seed), "generator": ALGORITHM, "stream_labels": sorted(set(labels))}
