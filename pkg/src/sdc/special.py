"""Log-gamma and digamma for positive real arguments (scalars or arrays)."""

from __future__ import annotations

import math

import numpy as np

# Lanczos approximation, g = 7, n = 9
_G = 7.0
_LANCZOS = (
    0.99999999999980993,
    676.5203681218851,
    -1259.1392167224028,
    771.32342877765313,
    -176.61502916214059,
    12.507343278686905,
    -0.13857109526572012,
    9.9843695780195716e-6,
    1.5056327351493116e-7,
)
_HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


def _positive(x) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    if np.any(~(a > 0)):
        raise ValueError("argument must be positive")
    return a


def _unwrap(a: np.ndarray, like):
    return float(a) if np.ndim(like) == 0 else a


def lgamma(x):
    """ln Gamma(x) for x > 0."""
    a = _positive(x)
    small = a < 0.5
    # lgamma(x) = lgamma(x + 1) - ln x keeps the Lanczos sum away from 0
    z = np.where(small, a + 1.0, a) - 1.0
    s = np.full_like(z, _LANCZOS[0])
    for i, c in enumerate(_LANCZOS[1:], start=1):
        s = s + c / (z + i)
    t = z + _G + 0.5
    out = _HALF_LOG_2PI + (z + 0.5) * np.log(t) - t + np.log(s)
    out = np.where(small, out - np.log(a), out)
    return _unwrap(out, x)


def digamma(x):
    """d/dx ln Gamma(x) for x > 0: upward recurrence to x >= 6, then the asymptotic series."""
    a = _positive(x).copy()
    acc = np.zeros_like(a)
    low = a < 6.0
    while np.any(low):
        acc = acc - np.where(low, 1.0 / a, 0.0)
        a = np.where(low, a + 1.0, a)
        low = a < 6.0
    r = 1.0 / (a * a)
    series = r * (1 / 12 - r * (1 / 120 - r * (1 / 252 - r * (1 / 240 - r * (1 / 132 - r * (691 / 32760 - r / 12))))))
    out = acc + np.log(a) - 0.5 / a - series
    return _unwrap(out, x)
