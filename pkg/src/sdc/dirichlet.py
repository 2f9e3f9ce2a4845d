"""Dirichlet density, moment-matching fit, alpha post-processing and entropies."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .special import digamma, lgamma

# guards the division only; exact zero variance is flagged degenerate
VAR_FLOOR = float(np.finfo(np.float64).tiny)
ALPHA_FLOOR = 1e-6
# score assigned when the fit collapses; ranks above every finite entropy
MAX_UNCERTAINTY = math.inf


class DegenerateDirichlet(ValueError):
    """Operation needs proper (non-degenerate) Dirichlet parameters."""


@dataclass
class DirichletParams:
    alpha: np.ndarray
    degenerate: bool = False
    note: str = ""

    def __post_init__(self):
        self.alpha = np.asarray(self.alpha, dtype=np.float64)

    @property
    def alpha0(self) -> float:
        return float(self.alpha.sum())

    @property
    def k(self) -> int:
        return self.alpha.size


def sample_dirichlet(alpha, n: int, rng: np.random.Generator) -> np.ndarray:
    """``n`` draws from Dir(alpha) via normalized Gamma variates; shape (n, K)."""
    g = rng.gamma(np.asarray(alpha, dtype=np.float64), size=(n, len(alpha)))
    return g / g.sum(axis=1, keepdims=True)


def log_pdf(params: DirichletParams, mu) -> float:
    if params.degenerate:
        raise DegenerateDirichlet("log_pdf of degenerate parameters")
    a = params.alpha
    mu = np.asarray(mu, dtype=np.float64)
    if mu.shape != a.shape:
        raise ValueError(f"point has {mu.size} coordinates, distribution has {a.size}")
    on_edge = mu <= 0
    if np.any(on_edge & (a != 1.0)):
        raise ValueError("density undefined on the simplex boundary for alpha_i != 1")
    logs = np.log(np.where(on_edge, 1.0, mu))
    return float(lgamma(a.sum()) - np.sum(lgamma(a)) + np.sum((a - 1.0) * logs))


def match_moments(samples) -> DirichletParams:
    """Fit Dir(alpha) to ``samples`` (N x K) by matching per-coordinate mean and variance.

    alpha_i = m_i * (m_i (1 - m_i) / v_i - 1), with unbiased sample variance.

    Saturated softmax outputs put coordinates at 1.0 or below 1e-12 in
    float64. For coordinates with mean above 1/2, ``1 - m_i`` and ``v_i`` are
    taken from the sum of the other coordinates, which avoids cancellation.
    The variance floor is the smallest normal double, so tiny means keep
    their own variance.
    """
    s = np.asarray(samples, dtype=np.float64)
    if s.ndim != 2 or s.shape[0] < 2:
        raise ValueError("need at least two probability vectors (N x K, N >= 2)")
    m = s.mean(axis=0)
    one_minus = 1.0 - m
    raw = s.var(axis=0, ddof=1)
    for i in np.flatnonzero(m > 0.5):
        rest = np.delete(s, i, axis=1).sum(axis=1)
        one_minus[i] = rest.mean()
        raw[i] = rest.var(ddof=1)
    spread = m * one_minus
    v = np.maximum(raw, VAR_FLOOR)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = spread / v
    alpha = m * (ratio - 1.0)
    if np.any(raw == 0.0):
        # identical samples in some coordinate: no spread to match
        alpha = np.where(raw == 0.0, ALPHA_FLOOR, alpha)
        return DirichletParams(alpha, degenerate=True, note="zero sample variance")
    bad = ratio <= 1.0
    if np.any(bad):
        alpha = np.where(bad, ALPHA_FLOOR, alpha)
        return DirichletParams(alpha, degenerate=True, note="sample variance too large for a Dirichlet")
    return DirichletParams(alpha)


def moments_of(params: DirichletParams) -> tuple[np.ndarray, np.ndarray]:
    if params.degenerate:
        raise DegenerateDirichlet("moments of degenerate parameters")
    a, a0 = params.alpha, params.alpha0
    return a / a0, a * (a0 - a) / (a0 * a0 * (a0 + 1.0))


def postprocess_alpha(params: DirichletParams, denominator: str = "classes") -> DirichletParams:
    """Sparsify alpha: entries <= 1 become 0, the rest map to (alpha_i - 1) / (S - K).

    S sums the entries above 1. ``denominator="classes"`` takes K as the class
    count; ``"dense"`` takes K as the number of entries above 1, which makes the
    result sum to one.
    """
    if params.degenerate:
        return params
    a = params.alpha
    dense = a > 1.0
    if not np.any(dense):
        return DirichletParams(a.copy(), degenerate=True, note="no alpha above 1")
    if denominator == "classes":
        k = a.size
    elif denominator == "dense":
        k = int(dense.sum())
    else:
        raise ValueError(f"unknown denominator reading {denominator!r}")
    denom = a[dense].sum() - k
    if denom <= 0:
        return DirichletParams(a.copy(), degenerate=True, note="non-positive denominator")
    return DirichletParams(np.where(dense, (a - 1.0) / denom, 0.0))


def dirichlet_entropy(params: DirichletParams) -> float:
    """Differential entropy of Dir(alpha).

    Zero entries (produced by :func:`postprocess_alpha`) carry no mass and are
    left out, so the entropy is taken on the face of the simplex they span.
    Degenerate parameters score :data:`MAX_UNCERTAINTY`.
    """
    if params.degenerate:
        return MAX_UNCERTAINTY
    a = params.alpha[params.alpha > 0]
    if a.size == 0:
        return MAX_UNCERTAINTY
    k = a.size
    a0 = a.sum()
    return float(
        np.sum(lgamma(a)) - lgamma(a0) + (a0 - k) * digamma(a0) - np.sum((a - 1.0) * digamma(a))
    )


def categorical_entropy(p) -> float:
    """Shannon entropy in nats with 0 ln 0 = 0."""
    p = np.asarray(p, dtype=np.float64)
    nz = p[p > 0]
    return float(-np.sum(nz * np.log(nz)))
