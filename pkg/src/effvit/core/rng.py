"""Seeded random streams.

The bit source is PCG64 (the 128-bit permuted congruential generator with the
XSL-RR output function) seeded through numpy's ``SeedSequence``; numpy pins the
raw stream of both for a given seed. Every transform on top of the raw 64-bit
words is implemented here, so the sample stream does not depend on numpy's
``Generator`` distribution code:

* uniform: the top 53 bits of each word scaled by 2**-53, giving [0, 1).
  A single-precision draw of n values reads m = ceil(n/2) words; sample i < m
  is the top 24 bits of word i's high 32-bit half, sample m + i the top 24
  bits of its low half, each scaled by 2**-24.
* normal: Box-Muller on a 2m-value uniform draw u; with r = sqrt(-2 log(1 - u[i]))
  and t = 2 pi u[m + i], sample i is r cos t and sample m + i is r sin t.
  Computed in the requested precision (f32 parameters use f32 arithmetic).
* truncated normal: normal samples outside ``[-bound, bound]`` (in units of the
  standard deviation) are rejected and redrawn in stream order.

Uniform draws are bit-identical across platforms. Normal draws go through
``log``/``cos`` and so may differ in the last ulp between libm builds.
"""

from __future__ import annotations

import numpy as np

_TWO_53 = float(2**-53)
_NAMES = {"f32": np.float32, "f64": np.float64}


def _dt(dtype) -> np.dtype:
    return np.dtype(_NAMES.get(dtype, dtype))


class Rng:
    def __init__(self, seed: int):
        if not 0 <= int(seed) < 2**64:
            raise ValueError(f"seed must be a 64-bit unsigned integer, got {seed}")
        self.seed = int(seed)
        self._bits = np.random.PCG64(self.seed)

    def raw(self, n: int) -> np.ndarray:
        return np.asarray(self._bits.random_raw(n), dtype=np.uint64)

    def uniform(self, n: int, lo: float = 0.0, hi: float = 1.0, dtype=np.float64) -> np.ndarray:
        dt = _dt(dtype)
        if dt == np.float32:
            m = (n + 1) // 2
            words = self.raw(m)
            halves = np.empty(2 * m, dtype=np.uint32)
            np.right_shift(words, np.uint64(40), out=halves[:m], casting="unsafe")
            np.bitwise_and(words, np.uint64(0xFFFFFFFF), out=words)
            np.right_shift(words, np.uint64(8), out=halves[m:], casting="unsafe")
            u = halves[:n].astype(np.float32)
            u *= np.float32(2**-24)
            if (lo, hi) != (0.0, 1.0):
                u *= np.float32(hi - lo)
                u += np.float32(lo)
            return u
        u = (self.raw(n) >> np.uint64(11)).astype(np.float64) * _TWO_53
        return u if (lo, hi) == (0.0, 1.0) else lo + (hi - lo) * u

    def normal(self, n: int, dtype=np.float64) -> np.ndarray:
        dt = _dt(dtype)
        m = (n + 1) // 2
        u = self.uniform(2 * m, dtype=dt)
        r = np.negative(u[:m])
        np.log1p(r, out=r)
        r *= dt.type(-2.0)
        np.sqrt(r, out=r)
        theta = u[m:]
        theta *= dt.type(2.0 * np.pi)
        out = np.empty(2 * m, dtype=dt)
        np.cos(theta, out=out[:m])
        np.sin(theta, out=out[m:])
        out[:m] *= r
        out[m:] *= r
        return out[:n]

    def trunc_normal(self, n: int, std: float, bound: float = 2.0, dtype=np.float64) -> np.ndarray:
        dt = _dt(dtype)
        out = np.empty(n, dtype=dt)
        filled = 0
        while filled < n:
            need = n - filled
            # ~4.6% of draws fall outside +-2; oversample so one round usually suffices
            z = self.normal(need + need // 16 + 16, dt)
            z = z[np.abs(z) <= bound][:need]
            out[filled : filled + len(z)] = z
            filled += len(z)
        out *= dt.type(std)
        return out

    def integers(self, n: int, high: int) -> np.ndarray:
        """Uniform integers in [0, high), via the multiply-shift map on 53-bit uniforms."""
        return np.floor(self.uniform(n) * high).astype(np.int64)
