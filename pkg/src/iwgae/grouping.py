"""Confidence-based accuracy groups."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .types import Dataset, max_softmax


def group_index(confidence, M: int) -> np.ndarray:
    """Group ``n`` in 1..M for confidence in ``[(n-1)/M, n/M)``; 1.0 goes to M."""
    c = np.asarray(confidence, dtype=float)
    return np.minimum(np.floor(c * M).astype(np.int64) + 1, M)


def assign_groups(data: Dataset, M: int, t: float = 1.0) -> np.ndarray:
    """Accuracy group (1-based) of every row, from its temperature-``t`` max softmax."""
    if M < 2:
        raise ValueError("M must be >= 2")
    if t <= 0:
        raise ValueError("temperature must be positive")
    conf, _ = max_softmax(data.logits, t)
    return group_index(conf, M)


@dataclass(frozen=True, eq=False)
class GroupSpec:
    M: int
    t: float
    source_groups: np.ndarray
    target_groups: np.ndarray

    @classmethod
    def build(cls, source: Dataset, target: Dataset, M: int, t: float) -> "GroupSpec":
        return cls(M, t, assign_groups(source, M, 1.0), assign_groups(target, M, t))

    def source_map(self, source: Dataset) -> dict[str, int]:
        return dict(zip(source.ids.tolist(), self.source_groups.tolist()))

    def target_map(self, target: Dataset) -> dict[str, int]:
        return dict(zip(target.ids.tolist(), self.target_groups.tolist()))


def group_variance_diagnostic(accuracies) -> tuple[float, float, bool]:
    """Popoviciu-based check that a group estimate beats per-sample estimates.

    Returns ``(lhs, rhs, lhs <= rhs)`` with ``lhs = (max - min)^2 / 4`` and
    ``rhs = (N - 1)/N * mean(beta * (1 - beta))``.
    """
    beta = np.asarray(accuracies, dtype=float)
    if beta.size == 0:
        raise ValueError("need at least one accuracy")
    n = beta.size
    lhs = 0.25 * float(beta.max() - beta.min()) ** 2
    rhs = (n - 1) / n * float(np.mean(beta * (1.0 - beta)))
    return lhs, rhs, lhs <= rhs
