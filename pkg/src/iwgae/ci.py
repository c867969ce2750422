"""Clopper-Pearson intervals and the per-bin importance-weight intervals built from them."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
from scipy.special import betainc

from .errors import EmptyInterval, InvalidCount
from .types import GaeConfig

log = logging.getLogger(__name__)

_MAX_ITER = 200
_TOL = 1e-10


@dataclass(frozen=True)
class BinomialCI:
    lower: float
    upper: float


def binom_cdf(k: int, m: int, theta: float) -> float:
    """P(X <= k) for X ~ Binom(m, theta), via the regularized incomplete beta."""
    if k < 0:
        return 0.0
    if k >= m:
        return 1.0
    if theta <= 0.0:
        return 1.0
    if theta >= 1.0:
        return 0.0
    return float(betainc(m - k, k + 1, 1.0 - theta))


def _bisect(pred, lo=0.0, hi=1.0):
    # pred is True on [0, x*) and False on [x*, 1]
    for _ in range(_MAX_ITER):
        if hi - lo < _TOL:
            break
        mid = 0.5 * (lo + hi)
        if pred(mid):
            lo = mid
        else:
            hi = mid
    return lo, hi


def clopper_pearson(k: int, m: int, delta: float) -> BinomialCI:
    """One-sided-level ``delta`` Clopper-Pearson bounds for a binomial proportion.

    ``upper = inf{theta : F(k; m, theta) <= delta}`` and
    ``lower = sup{theta : F(k - 1; m, theta) >= 1 - delta}``, found by
    bisection to 1e-10.
    """
    if m < 1 or k < 0:
        raise InvalidCount(f"need m >= 1 and k >= 0, got k={k}, m={m}")
    if k > m:
        raise InvalidCount(f"k={k} exceeds m={m}")
    if not 0 < delta < 1:
        raise ValueError("delta must lie in (0, 1)")
    if k == m:
        upper = 1.0
    else:
        _, upper = _bisect(lambda th: binom_cdf(k, m, th) > delta)
    if k == 0:
        lower = 0.0
    else:
        lower, _ = _bisect(lambda th: binom_cdf(k - 1, m, th) >= 1.0 - delta)
    return BinomialCI(lower, upper)


@dataclass(frozen=True)
class IwInterval:
    phi_lower: float
    phi_upper: float
    raw_lower: float
    raw_upper: float


def iw_interval(n_S: int, n_T: int, N_S: int, N_T: int, cfg: GaeConfig,
                delta: float | None = None) -> IwInterval:
    """Interval for one binned IW, intersected with ``[w_min, w_max]``.

    ``delta`` is the per-side CI level; it defaults to ``cfg.delta_bar``.
    Raises EmptyInterval when the clipped interval is empty.
    """
    if not (0 <= n_S <= N_S and 0 <= n_T <= N_T):
        raise InvalidCount("bin counts must not exceed domain sizes")
    delta = cfg.delta_bar if delta is None else delta
    raw_lower, raw_upper = _raw_interval(n_S, n_T, N_S, N_T, delta, cfg.G)
    lo = max(raw_lower, cfg.w_min)
    hi = min(raw_upper, cfg.w_max)
    if lo > hi:
        raise EmptyInterval(
            f"raw interval [{raw_lower:.4g}, {raw_upper:.4g}] misses "
            f"[{cfg.w_min:.4g}, {cfg.w_max:.4g}]")
    return IwInterval(lo, hi, raw_lower, raw_upper)


def _raw_interval(n_S, n_T, N_S, N_T, delta, G):
    ci_s = clopper_pearson(n_S, N_S, delta)
    ci_t = clopper_pearson(n_T, N_T, delta)
    lower = max(ci_t.lower - G, 0.0) / (ci_s.upper + G)
    den = max(ci_s.lower - G, 0.0)
    upper = (ci_t.upper + G) / den if den > 0 else math.inf
    return lower, upper


@dataclass(frozen=True, eq=False)
class IwIntervals:
    """Per-bin IW intervals plus the counts they were built from."""

    lower: np.ndarray
    upper: np.ndarray
    raw_lower: np.ndarray
    raw_upper: np.ndarray
    n_S: np.ndarray
    n_T: np.ndarray
    N_S: int
    N_T: int
    delta_bar: float
    G: float
    singleton_fallback: np.ndarray

    @property
    def B(self) -> int:
        return self.lower.shape[0]

    @property
    def midpoints(self) -> np.ndarray:
        return 0.5 * (self.lower + self.upper)

    @property
    def widths(self) -> np.ndarray:
        return self.upper - self.lower

    def contains(self, w, raw=False) -> np.ndarray:
        lo, hi = (self.raw_lower, self.raw_upper) if raw else (self.lower, self.upper)
        w = np.asarray(w, dtype=float)
        return (lo <= w) & (w <= hi)

    @classmethod
    def fixed(cls, B: int, value: float, n_S=None, n_T=None, N_S=0, N_T=0,
              delta_bar=0.0, G=0.0) -> "IwIntervals":
        """Singleton intervals ``{value}`` in every bin."""
        v = np.full(B, float(value))
        zeros = np.zeros(B, dtype=np.int64)
        return cls(v, v.copy(), v.copy(), v.copy(),
                   zeros if n_S is None else np.asarray(n_S),
                   zeros if n_T is None else np.asarray(n_T),
                   N_S, N_T, delta_bar, G, np.zeros(B, dtype=bool))


def iw_intervals(source_bins, target_bins, B: int, cfg: GaeConfig) -> IwIntervals:
    """Build the interval of every bin from per-sample bin indices.

    A bin whose clipped interval is empty degrades to the singleton at the
    clamped midpoint of its raw interval.
    """
    source_bins = np.asarray(source_bins)
    target_bins = np.asarray(target_bins)
    N_S, N_T = source_bins.shape[0], target_bins.shape[0]
    n_S = np.bincount(source_bins, minlength=B)
    n_T = np.bincount(target_bins, minlength=B)
    delta = cfg.per_side_delta(B)
    if cfg.fixed_weight is not None:
        w = min(max(cfg.fixed_weight, cfg.w_min), cfg.w_max)
        return IwIntervals.fixed(B, w, n_S, n_T, N_S, N_T, delta, cfg.G)
    lo, hi, rlo, rhi = (np.empty(B) for _ in range(4))
    fallback = np.zeros(B, dtype=bool)
    for j in range(B):
        try:
            iv = iw_interval(int(n_S[j]), int(n_T[j]), N_S, N_T, cfg, delta)
            lo[j], hi[j], rlo[j], rhi[j] = iv.phi_lower, iv.phi_upper, iv.raw_lower, iv.raw_upper
        except EmptyInterval as exc:
            rlo[j], rhi[j] = _raw_interval(int(n_S[j]), int(n_T[j]), N_S, N_T, delta, cfg.G)
            mid = 0.5 * (rlo[j] + rhi[j])
            lo[j] = hi[j] = min(max(mid, cfg.w_min), cfg.w_max)
            fallback[j] = True
            log.warning("bin %d: %s; using singleton %.4g", j, exc, lo[j])
    return IwIntervals(lo, hi, rlo, rhi, n_S, n_T, N_S, N_T, delta, cfg.G, fallback)
