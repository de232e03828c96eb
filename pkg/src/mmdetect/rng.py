"""Counter-based pseudo-random generator used everywhere in the package.

The generator is SplitMix64 run in counter mode: output ``i`` of a stream
with seed ``s`` is ``mix64(s + (i + 1) * GOLDEN)`` where ``mix64`` is the
SplitMix64 finalizer.  The full definition (all arithmetic mod 2**64):

    GOLDEN = 0x9E3779B97F4A7C15
    mix64(x): z = x
              z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
              z = (z ^ (z >> 27)) * 0x94D049BB133111EB
              return z ^ (z >> 31)

Derived values are defined on top of the raw u64 stream:

    float32 uniform in [0, 1):  (u >> 40) * 2**-24
    integer in [0, n):          ((u >> 32) * n) >> 32   (requires n < 2**32)
    normal pairs (Box-Muller):  u1 = (a >> 40 + 1) * 2**-24  in (0, 1]
                                u2 = (b >> 40) * 2**-24
                                r  = sqrt(-2 ln u1)
                                z0 = r cos(2 pi u2), z1 = r sin(2 pi u2)

Streams are identified by (seed, counter); the counter advances by exactly
the number of raw u64 draws consumed, so a stream can be checkpointed and
resumed bit-exactly.  Sub-streams are derived by hashing a label into the
seed (FNV-1a 64 over the UTF-8 label, folded through mix64), which keeps
independent components order-independent and reproducible.
"""

from __future__ import annotations

import numpy as np

GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_FNV_OFFSET = np.uint64(0xCBF29CE484222325)
_FNV_PRIME = np.uint64(0x100000001B3)

_U64 = np.uint64
_TWO_POW_NEG24 = np.float32(2.0 ** -24)


def mix64(x: np.ndarray | np.uint64) -> np.ndarray | np.uint64:
    """SplitMix64 finalizer, vectorized over uint64 arrays."""
    with np.errstate(over="ignore"):
        z = np.asarray(x, dtype=np.uint64)
        z = (z ^ (z >> _U64(30))) * _MIX1
        z = (z ^ (z >> _U64(27))) * _MIX2
        return z ^ (z >> _U64(31))


def fnv1a64(label: str) -> np.uint64:
    h = _FNV_OFFSET
    with np.errstate(over="ignore"):
        for byte in label.encode("utf-8"):
            h = (h ^ _U64(byte)) * _FNV_PRIME
    return h


def derive_seed(seed: int, *labels: object) -> int:
    """Fold labels into ``seed`` to name an independent sub-stream."""
    s = _U64(seed & 0xFFFFFFFFFFFFFFFF)
    for label in labels:
        s = mix64(s ^ fnv1a64(str(label)))
    return int(s)


class CounterRng:
    """SplitMix64 in counter mode; state is just (seed, counter)."""

    def __init__(self, seed: int, counter: int = 0):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.counter = int(counter)

    def derive(self, *labels: object) -> "CounterRng":
        return CounterRng(derive_seed(self.seed, *labels))

    def raw_u64(self, n: int) -> np.ndarray:
        idx = np.arange(self.counter + 1, self.counter + n + 1, dtype=np.uint64)
        self.counter += n
        with np.errstate(over="ignore"):
            return mix64(_U64(self.seed) + idx * GOLDEN)

    def uniform(self, shape=()) -> np.ndarray:
        n = int(np.prod(shape)) if shape else 1
        u = ((self.raw_u64(n) >> _U64(40)).astype(np.float32)) * _TWO_POW_NEG24
        return u.reshape(shape) if shape else np.float32(u[0])

    def randint(self, n_values: int, shape=()) -> np.ndarray:
        """Integers uniform in [0, n_values); n_values < 2**32."""
        if not 0 < n_values < 2 ** 32:
            raise ValueError(f"n_values out of range: {n_values}")
        n = int(np.prod(shape)) if shape else 1
        u = self.raw_u64(n)
        vals = ((u >> _U64(32)) * _U64(n_values)) >> _U64(32)
        out = vals.astype(np.int64)
        return out.reshape(shape) if shape else int(out[0])

    def normal(self, shape=(), scale: float = 1.0) -> np.ndarray:
        """Standard normals via Box-Muller; consumes 2 draws per pair."""
        n = int(np.prod(shape)) if shape else 1
        pairs = (n + 1) // 2
        raw = self.raw_u64(2 * pairs)
        a, b = raw[0::2], raw[1::2]
        u1 = ((a >> _U64(40)).astype(np.float64) + 1.0) * 2.0 ** -24  # (0, 1]
        u2 = (b >> _U64(40)).astype(np.float64) * 2.0 ** -24
        r = np.sqrt(-2.0 * np.log(u1))
        theta = 2.0 * np.pi * u2
        z = np.empty(2 * pairs, dtype=np.float64)
        z[0::2] = r * np.cos(theta)
        z[1::2] = r * np.sin(theta)
        out = (z[:n] * scale).astype(np.float32)
        return out.reshape(shape) if shape else np.float32(out[0])

    def shuffled(self, n: int) -> np.ndarray:
        """Deterministic Fisher-Yates permutation of range(n)."""
        perm = np.arange(n, dtype=np.int64)
        for i in range(n - 1, 0, -1):
            j = self.randint(i + 1)
            perm[i], perm[j] = perm[j], perm[i]
        return perm

    def state(self) -> tuple[int, int]:
        return (self.seed, self.counter)
