"""Counter-based deterministic random streams.

All randomness in the package flows through :class:`RngStream`, a
splitmix64-style counter generator. A stream's state is exactly the pair
``(seed, counter)``: two saved integers reproduce every subsequent draw
bit for bit, which is what makes checkpoint resume and the replay tests
exact rather than approximate.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError

_MASK = np.uint64(0xFFFFFFFFFFFFFFFF)
_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_U64_MAX = 0xFFFFFFFFFFFFFFFF

# 2**-53; (x >> 11) spans [0, 2**53), so uniforms land in [0, 1).
_INV_2_53 = float(np.ldexp(1.0, -53))


def _mix(values: np.ndarray) -> np.ndarray:
    """splitmix64 finalizer applied elementwise to uint64 values."""
    z = values
    z = (z ^ (z >> np.uint64(30))) * _MIX1
    z = (z ^ (z >> np.uint64(27))) * _MIX2
    return z ^ (z >> np.uint64(31))


@dataclass
class RngStream:
    """Deterministic random stream addressed by (seed, counter).

    Draw ``i`` (zero-based since stream creation) is a pure function of
    the seed and ``i``, so replaying from a saved counter is exact. The
    counter counts raw 64-bit words, not calls: ``normal`` consumes two
    words per variate.
    """

    seed: int
    counter: int = 0

    def __post_init__(self) -> None:
        if not 0 <= self.seed <= _U64_MAX:
            raise ContractError(f"seed must fit in 64 bits, got {self.seed}")
        if not 0 <= self.counter <= _U64_MAX:
            raise ContractError(f"counter must fit in 64 bits, got {self.counter}")

    def _raw(self, n: int) -> np.ndarray:
        """Next n raw 64-bit words; advances the counter by n."""
        idx = np.arange(self.counter, self.counter + n, dtype=np.uint64)
        self.counter = (self.counter + n) & _U64_MAX
        with np.errstate(over="ignore"):
            base = (np.uint64(self.seed) + (idx + np.uint64(1)) * _GOLDEN) & _MASK
            return _mix(base)

    def uniform(self, shape: tuple[int, ...] | int = ()) -> np.ndarray:
        """Uniform floats in [0, 1) with the given shape."""
        shape = (shape,) if isinstance(shape, int) else tuple(shape)
        n = int(np.prod(shape, dtype=np.int64)) if shape else 1
        out = (self._raw(n) >> np.uint64(11)).astype(np.float64) * _INV_2_53
        return out.reshape(shape)

    def normal(self, shape: tuple[int, ...] | int = ()) -> np.ndarray:
        """Standard normal floats via the Box-Muller cosine branch.

        Consumes exactly two 64-bit words per variate. The first word is
        mapped into (0, 1] so that log never sees zero.
        """
        shape = (shape,) if isinstance(shape, int) else tuple(shape)
        n = int(np.prod(shape, dtype=np.int64)) if shape else 1
        raw = self._raw(2 * n)
        u1 = ((raw[:n] >> np.uint64(11)).astype(np.float64) + 1.0) * _INV_2_53
        u2 = (raw[n:] >> np.uint64(11)).astype(np.float64) * _INV_2_53
        out = np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)
        return out.reshape(shape)

    def permutation(self, n: int) -> np.ndarray:
        """Uniformly random permutation of range(n) as an int64 array."""
        return np.argsort(self.uniform(n), kind="stable").astype(np.int64)

    def integers(self, n: int, high: int) -> np.ndarray:
        """n integers uniform over [0, high) (via floor of uniforms)."""
        if high <= 0:
            raise ContractError(f"high must be positive, got {high}")
        return np.minimum((self.uniform(n) * high).astype(np.int64), high - 1)

    def spawn(self, tag: int) -> "RngStream":
        """Independent child stream deterministically derived from a tag.

        Children with distinct tags (or from distinct parents) overlap
        with negligible probability; the parent's counter is untouched.
        """
        material = np.array([self.seed, 2 * tag + 1], dtype=np.uint64)
        child_seed = int(_mix(_mix(material[:1] * _GOLDEN) + material[1:])[0])
        return RngStream(seed=child_seed, counter=0)

    def state(self) -> tuple[int, int]:
        """(seed, counter) pair; feeding it back to RngStream replays."""
        return (self.seed, self.counter)
