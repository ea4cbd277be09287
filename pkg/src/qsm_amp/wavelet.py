"""Orthogonal periodic 3D Daubechies wavelet transform.

Coefficients are packed in the usual in-place layout: after level ``j`` the
low-pass block occupies the leading ``n / 2**j`` entries of every axis and
the seven detail bands of that level fill the remaining octants. The packed
array has the same shape as the input volume, which lets the solver treat
coefficients as an ordinary vector.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from itertools import product

import numpy as np

# Scaling filters from the spectral factorisation of the Daubechies
# polynomial (minimum phase), normalised to sum sqrt(2).
_DB_TAPS = {
    "db1": (
        0.70710678118654752440,
        0.70710678118654752440,
    ),
    "db2": (
        0.48296291314453414337,
        0.83651630373780790558,
        0.22414386804201338103,
        -0.12940952255126038117,
    ),
    "db4": (
        0.23037781330889650086,
        0.71484657055291564709,
        0.63088076792985890788,
        -0.027983769416859854211,
        -0.18703481171909308408,
        0.030841381835560763627,
        0.032883011666885199735,
        -0.010597401785069032105,
    ),
    "db6": (
        0.11154074335010946362,
        0.49462389039845308568,
        0.75113390802109535068,
        0.31525035170919762909,
        -0.22626469396543982008,
        -0.12976686756726193556,
        0.097501605587323049102,
        0.027522865530305728626,
        -0.031582039317486029565,
        0.00055384220116149613925,
        0.0047772575109455106396,
        -0.0010773010853084795649,
    ),
}

BASES = tuple(_DB_TAPS)
BAND_NAMES = tuple("".join(p) for p in product("LH", repeat=3))


def filters(basis: str) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(lowpass, highpass)`` analysis taps for ``basis``."""
    if basis not in _DB_TAPS:
        raise ValueError(f"unsupported wavelet basis {basis!r}; choose from {BASES}")
    h = np.array(_DB_TAPS[basis])
    g = h[::-1] * (-1.0) ** np.arange(h.size)
    return h, g


def default_levels(dims) -> int:
    """``min(3, floor(log2(min dim)) - 2)``, at least 1, capped by divisibility."""
    levels = max(1, min(3, int(math.floor(math.log2(min(dims)))) - 2))
    while levels > 1 and any(d % 2**levels for d in dims):
        levels -= 1
    return levels


def _check(dims, levels):
    if levels < 1:
        raise ValueError("levels must be >= 1")
    bad = [d for d in dims if d % 2**levels]
    if bad:
        raise ValueError(f"dims {tuple(dims)} not divisible by 2**{levels}")


def _analyze_axis(x, h, g, axis):
    # lo[k] = sum_j h[j] x[(2k + j) mod n], read from a periodically padded copy
    n = x.shape[axis]
    x = np.moveaxis(x, axis, 0)
    xp = np.take(x, np.arange(n + h.size - 2) % n, axis=0) if h.size > 2 else x
    lo = h[0] * xp[0:n:2]
    hi = g[0] * xp[0:n:2]
    for j in range(1, h.size):
        xs = xp[j:j + n:2]
        lo += h[j] * xs
        hi += g[j] * xs
    return np.moveaxis(np.concatenate([lo, hi]), 0, axis)


def _synthesize_axis(c, h, g, axis):
    n = c.shape[axis]
    c = np.moveaxis(c, axis, 0)
    lo, hi = c[: n // 2], c[n // 2:]
    buf = np.zeros((n + h.size - 2,) + c.shape[1:])
    for j in range(h.size):
        buf[j:j + n:2] += h[j] * lo + g[j] * hi
    out = buf[:n]
    for start in range(n, buf.shape[0], n):
        tail = buf[start:start + n]
        out[: tail.shape[0]] += tail
    return np.moveaxis(out, 0, axis)


def dwt3(x, basis="db1", levels=1) -> np.ndarray:
    """Packed multi-level analysis of a real 3D array."""
    x = np.asarray(x, dtype=np.float64)
    _check(x.shape, levels)
    h, g = filters(basis)
    out = x.copy()
    shape = np.array(x.shape)
    for _ in range(levels):
        sl = tuple(slice(0, s) for s in shape)
        block = out[sl]
        for axis in range(3):
            block = _analyze_axis(block, h, g, axis)
        out[sl] = block
        shape //= 2
    return out


def idwt3(c, basis="db1", levels=1) -> np.ndarray:
    """Inverse (and transpose) of :func:`dwt3`."""
    c = np.asarray(c, dtype=np.float64)
    _check(c.shape, levels)
    h, g = filters(basis)
    out = c.copy()
    for lev in reversed(range(levels)):
        sl = tuple(slice(0, s >> lev) for s in c.shape)
        block = out[sl]
        for axis in reversed(range(3)):
            block = _synthesize_axis(block, h, g, axis)
        out[sl] = block
    return out


@dataclass(frozen=True)
class WaveletCoeffs:
    """Multi-level coefficient tree stored in packed layout."""

    basis: str
    levels: int
    packed: np.ndarray

    @property
    def dims(self):
        return self.packed.shape

    def band(self, level: int, name: str) -> np.ndarray:
        """Subband ``name`` (e.g. ``"HLH"``) of ``level`` (1 = finest).

        ``"LLL"`` exists only at the coarsest level.
        """
        if not 1 <= level <= self.levels:
            raise ValueError(f"level {level} outside 1..{self.levels}")
        if name not in BAND_NAMES:
            raise ValueError(f"unknown band {name!r}")
        if name == "LLL" and level != self.levels:
            raise ValueError("LLL is only retained at the coarsest level")
        half = [d >> level for d in self.dims]
        sl = tuple(slice(0, s) if c == "L" else slice(s, 2 * s) for c, s in zip(name, half))
        return self.packed[sl]

    def bands(self, level: int) -> dict[str, np.ndarray]:
        names = BAND_NAMES if level == self.levels else BAND_NAMES[1:]
        return {name: self.band(level, name) for name in names}


def analyze(v, basis="db1", levels=None) -> WaveletCoeffs:
    """Analyze a volume (``Volume`` or array)."""
    data = getattr(v, "data", v)
    if levels is None:
        levels = default_levels(np.shape(data))
    return WaveletCoeffs(basis, levels, dwt3(data, basis, levels))


def synthesize(c: WaveletCoeffs) -> np.ndarray:
    if not isinstance(c, WaveletCoeffs) or c.packed.ndim != 3:
        raise ValueError("malformed coefficient tree")
    return idwt3(c.packed, c.basis, c.levels)
