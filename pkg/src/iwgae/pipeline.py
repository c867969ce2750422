"""End-to-end group accuracy estimation: score, bin, bound, solve, estimate."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .ci import IwIntervals, iw_intervals
from .domain import DomainClassifier, build_bins, score_datasets
from .optimizer import GroupSearch, Solver, alpha_target, midpoint_solution, solve_all_groups, solve_group
from .types import BinPartition, Dataset, GaeConfig

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class GroupAccuracyEstimate:
    """Estimated target accuracy of one group; ``alpha_hat_T`` is NaN when skipped."""

    group: int
    alpha_hat_T: float
    raw: float
    skipped: bool
    source_count: int
    target_count: int


@dataclass(eq=False)
class GaeResult:
    config: GaeConfig
    source: Dataset  # with iw_score attached
    target: Dataset
    partition: BinPartition
    intervals: IwIntervals
    search: GroupSearch
    estimates: dict[int, GroupAccuracyEstimate]
    classifier: DomainClassifier | None = None
    method: str = "iw-gae"

    @property
    def t(self) -> float:
        return self.search.best_t

    @property
    def target_groups(self) -> np.ndarray:
        return self.search.best.target_groups

    @property
    def source_groups(self) -> np.ndarray:
        return self.search.source_groups


def group_estimates(search: GroupSearch) -> dict[int, GroupAccuracyEstimate]:
    """Per-group target accuracy estimates at the selected temperature."""
    best = search.best
    out = {}
    for n in range(1, search.M + 1):
        n_s = int(np.sum(search.source_groups == n))
        n_t = int(np.sum(best.target_groups == n))
        sol = best.solutions.get(n)
        if sol is None:
            out[n] = GroupAccuracyEstimate(n, math.nan, math.nan, True, n_s, n_t)
            continue
        clipped, raw = alpha_target(best.counts[n], sol.w_source)
        out[n] = GroupAccuracyEstimate(n, clipped, raw, False, n_s, n_t)
    return out


def run_iwgae(source: Dataset, target: Dataset, cfg: GaeConfig | None = None,
              solver: Solver = solve_group, method: str = "iw-gae") -> GaeResult:
    """Estimate per-group target accuracy from labeled source and unlabeled target data.

    Both datasets need either features (a domain classifier is then fitted)
    or precomputed ``iw_score`` values.
    """
    cfg = cfg or GaeConfig()
    source, target, clf = score_datasets(source, target, cfg.l2_penalty, cfg.seed)
    partition = build_bins(source.iw_score, target.iw_score, cfg.B)
    src_bins = partition.index(source.iw_score)
    tgt_bins = partition.index(target.iw_score)
    intervals = iw_intervals(src_bins, tgt_bins, partition.B, cfg)
    search = solve_all_groups(source, target, partition, intervals, cfg, solver)
    n_fb = sum(s.fallback for s in search.solutions.values())
    if n_fb:
        log.info("%s: %d of %d groups fell back to midpoints", method, n_fb, len(search.solutions))
    return GaeResult(cfg, source, target, partition, intervals, search,
                     group_estimates(search), clf, method)


def run_iwmid(source: Dataset, target: Dataset, cfg: GaeConfig | None = None) -> GaeResult:
    """The same pipeline with every binned IW fixed at its interval midpoint."""
    return run_iwgae(source, target, cfg, solver=midpoint_solution, method="iw-mid")
