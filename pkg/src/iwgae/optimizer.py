"""Per-group choice of binned importance weights and the outer temperature search.

For one accuracy group the decision variables are two vectors of binned IWs,
``w_source`` (used on source samples) and ``w_target`` (used on target
samples), each confined to the per-bin intervals.  The objective is the
squared gap between the Monte-Carlo source group accuracy and the IW-based
one,

    (b.sum()/s.sum() - (sum(a / w_target) / n_T) * (sum(b * w_source) / n_S))**2,

where ``a``, ``b`` and ``s`` are the per-bin target counts, correct source
counts and source counts of the group.  Side constraints keep the two
vectors close bin by bin and make the group-conditional means of
``w_source`` (on source) and ``1 / w_target`` (on target) match the
empirical group-mass ratios up to ``delta_prob``.
"""

from __future__ import annotations

import logging
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.optimize import minimize

from .ci import IwIntervals
from .errors import EmptyGroup, NoEligibleGroups
from .grouping import assign_groups
from .types import BinPartition, Dataset, GaeConfig

log = logging.getLogger(__name__)

COUPLING_ATOL = 1e-9
PROB_ATOL = 1e-6
# constraints handed to the solver are tightened by this much so that
# solver round-off stays within the tolerances above
_PROB_MARGIN = 1e-8


@dataclass(frozen=True, eq=False)
class GroupBinCounts:
    """Per-bin counts of one group: target ``a``, correct source ``b``, source ``s``."""

    a: np.ndarray
    b: np.ndarray
    s: np.ndarray
    N_S: int
    N_T: int

    def __post_init__(self):
        for name in ("a", "b", "s"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float))
        if np.any(self.b > self.s):
            raise ValueError("correct source count exceeds source count in some bin")

    @property
    def B(self) -> int:
        return self.a.shape[0]

    @property
    def n_source(self) -> int:
        return int(self.s.sum())

    @property
    def n_target(self) -> int:
        return int(self.a.sum())

    @property
    def p_source(self) -> float:
        return self.n_source / self.N_S

    @property
    def p_target(self) -> float:
        return self.n_target / self.N_T

    def _check(self):
        if self.n_source == 0 or self.n_target == 0:
            raise EmptyGroup(f"group has {self.n_source} source and {self.n_target} target samples")


def group_bin_counts(source_bins, source_correct, source_mask, target_bins, target_mask,
                     B: int) -> GroupBinCounts:
    source_bins = np.asarray(source_bins)
    target_bins = np.asarray(target_bins)
    src = source_bins[source_mask]
    ok = np.asarray(source_correct, bool)[source_mask]
    return GroupBinCounts(
        a=np.bincount(target_bins[target_mask], minlength=B),
        b=np.bincount(src[ok], minlength=B),
        s=np.bincount(src, minlength=B),
        N_S=source_bins.shape[0],
        N_T=target_bins.shape[0],
    )


def alpha_mc(counts: GroupBinCounts) -> float:
    """Fraction of correct source predictions in the group."""
    if counts.n_source == 0:
        raise EmptyGroup("no source samples in group")
    return float(counts.b.sum() / counts.s.sum())


def alpha_iw_source(counts: GroupBinCounts, w_source, w_target) -> float:
    """IW-based source group accuracy with separate source/target weights."""
    counts._check()
    w_source = np.asarray(w_source, float)
    w_target = np.asarray(w_target, float)
    inv_mean = float(np.sum(counts.a / w_target)) / counts.n_target
    weighted_acc = float(np.sum(counts.b * w_source)) / counts.n_source
    return inv_mean * weighted_acc


def alpha_target(counts: GroupBinCounts, w_source) -> tuple[float, float]:
    """Target group accuracy estimate ``(clipped to [0, 1], raw)``."""
    counts._check()
    raw = (float(np.sum(counts.b * np.asarray(w_source, float))) / counts.n_source
           * counts.p_source / counts.p_target)
    return min(max(raw, 0.0), 1.0), raw


def eps_opt(counts: GroupBinCounts, w_source, w_target) -> float:
    return (alpha_mc(counts) - alpha_iw_source(counts, w_source, w_target)) ** 2


@dataclass(frozen=True, eq=False)
class GroupSolution:
    w_source: np.ndarray
    w_target: np.ndarray
    eps_opt: float
    feasible: bool
    t: float = 1.0
    fallback: bool = False
    eps_midpoint: float = math.nan

    @property
    def w_min(self) -> float:
        return float(min(self.w_source.min(), self.w_target.min()))

    @property
    def w_max(self) -> float:
        return float(max(self.w_source.max(), self.w_target.max()))


@dataclass(frozen=True)
class ConstraintReport:
    box: bool
    coupling: float  # max_i (w_t - w_s)^2 - delta_tol
    prob_source: float  # |E_S[w_s] - P_T/P_S| - delta_prob
    prob_target: float  # |E_T[1/w_t] - P_S/P_T| - delta_prob

    @property
    def ok(self) -> bool:
        return (self.box and self.coupling <= COUPLING_ATOL
                and self.prob_source <= PROB_ATOL and self.prob_target <= PROB_ATOL)


def check_constraints(counts: GroupBinCounts, intervals: IwIntervals, w_source, w_target,
                      cfg: GaeConfig) -> ConstraintReport:
    ws = np.asarray(w_source, float)
    wt = np.asarray(w_target, float)
    lo, hi = intervals.lower, intervals.upper
    box = bool(np.all((lo <= ws) & (ws <= hi) & (lo <= wt) & (wt <= hi)))
    coupling = float(np.max((wt - ws) ** 2)) - cfg.delta_tol
    ratio = counts.p_target / counts.p_source
    e_src = float(np.sum(counts.s * ws)) / counts.n_source
    e_tgt = float(np.sum(counts.a / wt)) / counts.n_target
    return ConstraintReport(box, coupling,
                            abs(e_src - ratio) - cfg.delta_prob,
                            abs(e_tgt - 1.0 / ratio) - cfg.delta_prob)


class _Problem:
    """SLSQP formulation over the bins the group actually touches."""

    def __init__(self, counts: GroupBinCounts, intervals: IwIntervals, cfg: GaeConfig):
        self.counts = counts
        self.cfg = cfg
        self.lo = intervals.lower
        self.hi = intervals.upper
        self.mid = intervals.midpoints
        self.active = np.flatnonzero((counts.a > 0) | (counts.s > 0))
        act = self.active
        self.k = act.size
        self.a = counts.a[act] / counts.n_target
        self.b = counts.b[act] / counts.n_source
        self.s = counts.s[act] / counts.n_source
        self.target = alpha_mc(counts)
        self.ratio = counts.p_target / counts.p_source
        self.tau = math.sqrt(cfg.delta_tol)
        lo, hi = self.lo[act], self.hi[act]
        self.bounds = list(zip(lo, hi)) * 2

    def split(self, x):
        return x[: self.k], x[self.k:]

    def full(self, x):
        ws, wt = self.mid.copy(), self.mid.copy()
        ws[self.active], wt[self.active] = self.split(x)
        return ws, wt

    def objective(self, x):
        ws, wt = self.split(x)
        u = self.a @ (1.0 / wt)
        v = self.b @ ws
        r = self.target - u * v
        g = np.empty_like(x)
        g[: self.k] = -2.0 * r * u * self.b
        g[self.k:] = 2.0 * r * v * self.a / wt ** 2
        return r * r, g

    def constraints(self):
        k = self.k
        eye = np.eye(k)
        cons = []
        # coupling: |w_t - w_s| <= tau, linear
        d = np.hstack([-eye, eye])
        if self.tau == 0.0:
            cons.append({"type": "eq", "fun": lambda x: d @ x, "jac": lambda x: d})
        else:
            cons.append({"type": "ineq", "fun": lambda x: self.tau - d @ x, "jac": lambda x: -d})
            cons.append({"type": "ineq", "fun": lambda x: self.tau + d @ x, "jac": lambda x: d})
        dp = max(self.cfg.delta_prob - _PROB_MARGIN, 0.0)
        js = np.concatenate([self.s, np.zeros(k)])
        inv_ratio = 1.0 / self.ratio

        def u(x):
            return self.a @ (1.0 / x[k:])

        def ju(x):
            return np.concatenate([np.zeros(k), -self.a / x[k:] ** 2])

        if dp == 0.0:
            cons.append({"type": "eq", "fun": lambda x: np.array([js @ x - self.ratio]),
                         "jac": lambda x: js[None, :]})
            cons.append({"type": "eq", "fun": lambda x: np.array([u(x) - inv_ratio]),
                         "jac": lambda x: ju(x)[None, :]})
        else:
            cons.append({"type": "ineq",
                         "fun": lambda x: np.array([dp - (js @ x - self.ratio), dp + (js @ x - self.ratio)]),
                         "jac": lambda x: np.vstack([-js, js])})
            cons.append({"type": "ineq",
                         "fun": lambda x: np.array([dp - (u(x) - inv_ratio), dp + (u(x) - inv_ratio)]),
                         "jac": lambda x: np.vstack([-ju(x), ju(x)])})
        return cons

    def starts(self):
        act = self.active
        lo, hi, mid = self.lo[act], self.hi[act], self.mid[act]
        yield np.concatenate([mid, mid])
        # push the product up: large source weights, small target weights
        yield np.concatenate([hi, np.maximum(lo, hi - self.tau)])
        # and down
        yield np.concatenate([lo, np.minimum(hi, lo + self.tau)])

    def separably_infeasible(self) -> bool:
        """True when the box alone rules out one of the two mean constraints."""
        act = self.active
        lo, hi = self.lo[act], self.hi[act]
        dp = self.cfg.delta_prob
        src_lo, src_hi = self.s @ lo, self.s @ hi
        tgt_lo, tgt_hi = self.a @ (1.0 / hi), self.a @ (1.0 / lo)
        slack = PROB_ATOL
        return (src_hi < self.ratio - dp - slack or src_lo > self.ratio + dp + slack
                or tgt_hi < 1.0 / self.ratio - dp - slack or tgt_lo > 1.0 / self.ratio + dp + slack)

    def run(self, x0):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            res = minimize(self.objective, x0, jac=True, method="SLSQP", bounds=self.bounds,
                           constraints=self.constraints(),
                           options={"maxiter": self.cfg.max_iter, "ftol": self.cfg.opt_tol})
        x = np.clip(res.x, [b[0] for b in self.bounds], [b[1] for b in self.bounds])
        return x


def midpoint_solution(counts: GroupBinCounts, intervals: IwIntervals, cfg: GaeConfig,
                      t: float = 1.0) -> GroupSolution:
    """The interval midpoints, evaluated but not optimized."""
    mid = intervals.midpoints
    eps = eps_opt(counts, mid, mid)
    ok = check_constraints(counts, intervals, mid, mid, cfg).ok
    return GroupSolution(mid.copy(), mid.copy(), eps, ok, t, fallback=False, eps_midpoint=eps)


def solve_group(counts: GroupBinCounts, intervals: IwIntervals, cfg: GaeConfig,
                t: float = 1.0) -> GroupSolution:
    """Pick binned IWs from their intervals that close the source-accuracy gap.

    Starts from the interval midpoints and never returns a point worse than
    them. When no feasible point beats the midpoints, they are returned
    as is; ``fallback`` is set when they violate a constraint.
    """
    counts._check()
    mid = intervals.midpoints
    eps_mid = eps_opt(counts, mid, mid)
    mid_ok = check_constraints(counts, intervals, mid, mid, cfg).ok
    if np.all(intervals.lower == intervals.upper) or eps_mid == 0.0 or (mid_ok and eps_mid <= cfg.opt_tol):
        return GroupSolution(mid.copy(), mid.copy(), eps_mid, mid_ok, t,
                             fallback=not mid_ok, eps_midpoint=eps_mid)
    prob = _Problem(counts, intervals, cfg)
    best = None
    if prob.separably_infeasible():
        log.debug("group infeasible on its box (t=%s); using midpoints", t)
        return GroupSolution(mid.copy(), mid.copy(), eps_mid, mid_ok, t, fallback=not mid_ok,
                             eps_midpoint=eps_mid)
    for x0 in prob.starts():
        try:
            x = prob.run(x0)
        except (ValueError, np.linalg.LinAlgError) as exc:  # pragma: no cover
            log.debug("SLSQP failed: %s", exc)
            continue
        ws, wt = prob.full(x)
        if not check_constraints(counts, intervals, ws, wt, cfg).ok:
            continue
        eps = eps_opt(counts, ws, wt)
        if best is None or eps < best[0]:
            best = (eps, ws, wt)
        if best[0] <= cfg.opt_tol:
            break
    if best is not None and best[0] <= eps_mid:
        return GroupSolution(best[1], best[2], best[0], True, t, fallback=False,
                             eps_midpoint=eps_mid)
    if best is None:
        log.debug("no feasible point found (t=%s); using midpoints", t)
    return GroupSolution(mid.copy(), mid.copy(), eps_mid, mid_ok, t, fallback=not mid_ok,
                         eps_midpoint=eps_mid)


Solver = Callable[[GroupBinCounts, IwIntervals, GaeConfig, float], GroupSolution]


@dataclass(eq=False)
class TemperatureResult:
    t: float
    solutions: dict[int, GroupSolution]
    counts: dict[int, GroupBinCounts]
    skipped: list[int]
    target_groups: np.ndarray

    @property
    def total_eps(self) -> float:
        if not self.solutions:
            return math.inf
        return float(sum(self.solutions[n].eps_opt for n in sorted(self.solutions)))


@dataclass(eq=False)
class GroupSearch:
    """Outcome of the temperature search; ``best`` is the selected temperature's run."""

    best_t: float
    by_temperature: dict[float, TemperatureResult]
    source_groups: np.ndarray
    source_bins: np.ndarray
    target_bins: np.ndarray
    source_correct: np.ndarray
    M: int

    @property
    def best(self) -> TemperatureResult:
        return self.by_temperature[self.best_t]

    @property
    def solutions(self) -> dict[int, GroupSolution]:
        return self.best.solutions

    @property
    def counts(self) -> dict[int, GroupBinCounts]:
        return self.best.counts


def _solve_at(t, source_groups, source_bins, correct, target, target_bins, intervals, cfg, solver):
    tg = assign_groups(target, cfg.M, t)
    sols, counts, skipped = {}, {}, []
    for n in range(1, cfg.M + 1):
        smask = source_groups == n
        tmask = tg == n
        c = group_bin_counts(source_bins, correct, smask, target_bins, tmask, intervals.B)
        if min(c.n_source, c.n_target) < max(cfg.min_group_size, 1):
            skipped.append(n)
            continue
        counts[n] = c
        sols[n] = solver(c, intervals, cfg, t)
    return TemperatureResult(t, sols, counts, skipped, tg)


def solve_all_groups(source: Dataset, target: Dataset, partition: BinPartition,
                     intervals: IwIntervals, cfg: GaeConfig,
                     solver: Solver = solve_group) -> GroupSearch:
    """Solve every eligible group for each temperature and keep the best temperature.

    Both datasets must carry ``iw_score``. The selected temperature minimizes
    the summed ``eps_opt``; ties go to the temperature closest to 1, then the
    smaller one.
    """
    if source.iw_score is None or target.iw_score is None:
        raise ValueError("datasets need iw_score to be binned")
    source_bins = partition.index(source.iw_score)
    target_bins = partition.index(target.iw_score)
    correct = source.correct
    source_groups = assign_groups(source, cfg.M, 1.0)
    temps = sorted(set(cfg.temp_grid))
    args = (source_groups, source_bins, correct, target, target_bins, intervals, cfg, solver)
    if cfg.threads > 1 and len(temps) > 1:
        with ThreadPoolExecutor(max_workers=cfg.threads) as pool:
            results = list(pool.map(lambda t: _solve_at(t, *args), temps))
    else:
        results = [_solve_at(t, *args) for t in temps]
    by_t = {r.t: r for r in results}
    eligible = [r for r in results if r.solutions]
    if not eligible:
        raise NoEligibleGroups("every group is empty or below the size threshold at every temperature")
    best = min(eligible, key=lambda r: (r.total_eps, abs(r.t - 1.0), r.t))
    return GroupSearch(best.t, by_t, source_groups, source_bins, target_bins, correct, cfg.M)
