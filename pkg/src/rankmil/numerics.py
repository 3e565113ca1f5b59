"""Seeded pseudo-randomness, small dense-algebra helpers, and a
finite-difference gradient checker.

Everything downstream (data splits, weight init, bag sampling, the
synthetic generator) draws from :class:`Rng`, so the generator algorithm
and its constants are part of the on-disk compatibility story and must
never change.
"""

from __future__ import annotations

import math
from typing import Callable, MutableSequence

import numpy as np

_MASK64 = 0xFFFFFFFFFFFFFFFF

# SplitMix64 (Steele, Lea & Flood 2014). GAMMA is the 64-bit golden
# ratio increment; MIX1/MIX2 are the finalizer multipliers. Fixed
# forever: seeded streams are covered by golden-value tests.
_GAMMA = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB


def mix64(z: int) -> int:
    """SplitMix64 output finalizer: a 64-bit avalanche permutation."""
    z &= _MASK64
    z = ((z ^ (z >> 30)) * _MIX1) & _MASK64
    z = ((z ^ (z >> 27)) * _MIX2) & _MASK64
    return z ^ (z >> 31)


def derive(seed: int, *salts: int) -> int:
    """Fold integer salts into a seed, producing a decorrelated seed.

    Used to give each consumer (weight init, bag sampling, synthetic
    direction, ...) its own named substream of a single user seed.
    """
    z = mix64((seed + _GAMMA) & _MASK64)
    for salt in salts:
        z = mix64(z ^ mix64((salt + _GAMMA) & _MASK64))
    return z


class Rng:
    """Counter-based SplitMix64 generator.

    Output n of seed s is ``mix64(s + n * GAMMA mod 2**64)`` for n >= 1,
    so a block of draws can be produced with vectorised uint64 math and
    is bit-identical to the same number of sequential draws.

    Single-owner: one instance must not be shared across concurrent
    callers, the counter is plain mutable state.
    """

    def __init__(self, seed: int) -> None:
        self._state = seed & _MASK64

    def next_u64(self) -> int:
        self._state = (self._state + _GAMMA) & _MASK64
        return mix64(self._state)

    def u64_block(self, n: int) -> np.ndarray:
        """The next ``n`` raw draws as uint64, identical to ``n``
        successive :meth:`next_u64` calls."""
        if n < 0:
            raise ValueError(f"block size must be >= 0, got {n}")
        idx = np.arange(1, n + 1, dtype=np.uint64)
        z = np.uint64(self._state) + idx * np.uint64(_GAMMA)
        z = (z ^ (z >> np.uint64(30))) * np.uint64(_MIX1)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(_MIX2)
        z = z ^ (z >> np.uint64(31))
        self._state = (self._state + n * _GAMMA) & _MASK64
        return z

    def uniform(self) -> float:
        """One draw from [0, 1) with 53 random bits."""
        return (self.next_u64() >> 11) * 2.0**-53

    def uniform_block(self, n: int) -> np.ndarray:
        return (self.u64_block(n) >> np.uint64(11)).astype(np.float64) * 2.0**-53

    def gauss_block(self, n: int) -> np.ndarray:
        """``n`` standard normal draws via Box-Muller on consecutive
        uniform pairs. Odd ``n`` still consumes a full final pair and
        discards its sine half, keeping the stream position a pure
        function of the draw count.
        """
        if n < 0:
            raise ValueError(f"sample count must be >= 0, got {n}")
        pairs = (n + 1) // 2
        u = self.uniform_block(2 * pairs)
        # 1 - u1 is in (0, 1], so the log is finite.
        r = np.sqrt(-2.0 * np.log1p(-u[0::2]))
        theta = (2.0 * math.pi) * u[1::2]
        out = np.empty(2 * pairs)
        out[0::2] = r * np.cos(theta)
        out[1::2] = r * np.sin(theta)
        return out[:n]

    def bounded_int(self, n: int) -> int:
        """Uniform integer in [0, n). Plain modulo reduction: the bias
        is below n / 2**64, irrelevant for index-scale n."""
        if n <= 0:
            raise ValueError(f"bound must be positive, got {n}")
        return self.next_u64() % n

    def shuffle(self, items: MutableSequence) -> None:
        """In-place Fisher-Yates shuffle, drawing from the top down."""
        for i in range(len(items) - 1, 0, -1):
            j = self.bounded_int(i + 1)
            items[i], items[j] = items[j], items[i]


def gauss_sample(rng: Rng, n: int) -> np.ndarray:
    """``n >= 1`` standard normal draws from ``rng``."""
    if n < 1:
        raise ValueError(f"sample count must be >= 1, got {n}")
    return rng.gauss_block(n)


def matvec(m: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Dense matrix-vector product in float64."""
    m = np.asarray(m, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if m.ndim != 2:
        raise ValueError(f"matrix must be 2-d, got shape {m.shape}")
    if v.ndim != 1:
        raise ValueError(f"vector must be 1-d, got shape {v.shape}")
    if m.shape[1] != v.shape[0]:
        raise ValueError(
            f"dimension mismatch: matrix is {m.shape[0]}x{m.shape[1]}, "
            f"vector has {v.shape[0]} entries"
        )
    return m @ v


def finite_diff_grad(
    f: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-5
) -> np.ndarray:
    """Central-difference gradient of a scalar function at ``x``.

    The reference every analytic gradient in this package is checked
    against. Non-finite function values raise FloatingPointError.
    """
    if not (h > 0.0 and math.isfinite(h)):
        raise ValueError(f"step size must be positive and finite, got {h}")
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError(f"point must be a 1-d vector, got shape {x.shape}")
    grad = np.empty_like(x)
    for i in range(x.size):
        step = np.zeros_like(x)
        step[i] = h
        hi = float(f(x + step))
        lo = float(f(x - step))
        if not (math.isfinite(hi) and math.isfinite(lo)):
            raise FloatingPointError(
                f"non-finite function value at coordinate {i}: f+={hi}, f-={lo}"
            )
        grad[i] = (hi - lo) / (2.0 * h)
    return grad


def ceil_frac(fraction: float, n: int) -> int:
    """``ceil(fraction * n)`` guarded against the product landing one
    ulp above an exact integer (0.1 * 30 == 3.0000000000000004)."""
    if n < 0:
        raise ValueError(f"count must be >= 0, got {n}")
    if not (fraction >= 0.0 and math.isfinite(fraction)):
        raise ValueError(f"fraction must be >= 0 and finite, got {fraction}")
    return max(0, math.ceil(fraction * n * (1.0 - 1e-12)))
