"""Discriminative density-ratio scoring with a logistic domain classifier."""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize
from scipy.special import expit, log_expit

from .errors import Degenerate, DegenerateBins, MissingFeatures
from .types import BinPartition, Dataset

log = logging.getLogger(__name__)

LINEAR_CLAMP = 30.0
GRAD_TOL = 1e-6


@dataclass(frozen=True, eq=False)
class DomainClassifier:
    """Logistic model of P(target | x); ``decision`` is its log-odds."""

    weights: np.ndarray
    bias: float
    class_prior_ratio: float
    l2_penalty: float
    grad_norm: float = 0.0

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        if not np.all(np.isfinite(w)):
            raise ValueError("weights must be finite")
        if not self.class_prior_ratio > 0:
            raise ValueError("class_prior_ratio must be positive")
        w.flags.writeable = False
        object.__setattr__(self, "weights", w)

    def decision(self, x) -> np.ndarray:
        return np.asarray(x, dtype=float) @ self.weights + self.bias

    def predict_target_proba(self, x) -> np.ndarray:
        return expit(self.decision(x))

    def score(self, x) -> np.ndarray:
        return iw_score(self, x)


def iw_score(clf: DomainClassifier, x) -> np.ndarray | float:
    """Prior ratio times the target-membership odds; accepts one row or many."""
    x = np.asarray(x, dtype=float)
    z = np.clip(clf.decision(x), -LINEAR_CLAMP, LINEAR_CLAMP)
    out = clf.class_prior_ratio * np.exp(z)
    return float(out) if out.ndim == 0 else out


def _objective(theta, X, y, lam):
    w, b = theta[:-1], theta[-1]
    z = X @ w + b
    # -log p(y|x) for labels in {0, 1}
    loss = -np.sum(y * log_expit(z) + (1.0 - y) * log_expit(-z)) + 0.5 * lam * (w @ w)
    r = expit(z) - y
    grad = np.empty_like(theta)
    grad[:-1] = X.T @ r + lam * w
    grad[-1] = r.sum()
    return loss, grad


def _newton_polish(theta, X, y, lam, max_steps=50):
    Xb = np.hstack([X, np.ones((X.shape[0], 1))])
    reg = np.full(theta.shape[0], lam)
    reg[-1] = 0.0
    for _ in range(max_steps):
        f, g = _objective(theta, X, y, lam)
        if np.linalg.norm(g) <= GRAD_TOL:
            break
        p = expit(Xb @ theta)
        H = (Xb * (p * (1 - p))[:, None]).T @ Xb + np.diag(reg)
        H[np.diag_indices_from(H)] += 1e-12
        step = np.linalg.solve(H, g)
        t = 1.0
        while t > 1e-10:
            cand = theta - t * step
            if _objective(cand, X, y, lam)[0] <= f:
                theta = cand
                break
            t *= 0.5
        else:
            break
    return theta


def fit_domain_classifier(source: Dataset, target: Dataset, l2_penalty: float = 1.0,
                          seed: int = 0) -> DomainClassifier:
    """Fit an L2-regularized logistic domain classifier (source=0, target=1).

    The smaller domain is upsampled with replacement to equalize sizes, so
    the fitted odds estimate the density ratio directly and the prior ratio
    of the training set is 1.
    """
    if source.features is None or target.features is None:
        raise MissingFeatures("both datasets need features to fit a domain classifier")
    if source.d == 0 or target.d == 0:
        raise Degenerate("feature dimension is zero")
    if source.d != target.d:
        raise MissingFeatures(f"feature dims differ: {source.d} vs {target.d}")
    Xs, Xt = source.features, target.features
    rng = np.random.default_rng(seed)
    if len(Xs) < len(Xt):
        extra = Xs[rng.integers(0, len(Xs), size=len(Xt) - len(Xs))]
        Xs = np.vstack([Xs, extra])
    elif len(Xt) < len(Xs):
        extra = Xt[rng.integers(0, len(Xt), size=len(Xs) - len(Xt))]
        Xt = np.vstack([Xt, extra])
    X = np.vstack([Xs, Xt])
    y = np.concatenate([np.zeros(len(Xs)), np.ones(len(Xt))])
    theta0 = np.zeros(X.shape[1] + 1)
    res = minimize(_objective, theta0, args=(X, y, l2_penalty), jac=True, method="L-BFGS-B",
                   options={"gtol": GRAD_TOL * 0.1, "ftol": 1e-15, "maxiter": 5000})
    theta = res.x
    gnorm = np.linalg.norm(_objective(theta, X, y, l2_penalty)[1])
    if gnorm > GRAD_TOL:
        theta = _newton_polish(theta, X, y, l2_penalty)
        gnorm = np.linalg.norm(_objective(theta, X, y, l2_penalty)[1])
        if gnorm > GRAD_TOL:
            log.warning("domain classifier stopped at gradient norm %.3g", gnorm)
    return DomainClassifier(weights=theta[:-1], bias=float(theta[-1]),
                            class_prior_ratio=len(Xs) / len(Xt), l2_penalty=l2_penalty,
                            grad_norm=float(gnorm))


def build_bins(scores_source, scores_target, B: int) -> BinPartition:
    """Quantile bins over the pooled IW scores, merged until none is empty."""
    pooled = np.concatenate([np.asarray(scores_source, float), np.asarray(scores_target, float)])
    if B < 1:
        raise ValueError("B must be >= 1")
    if pooled.shape[0] < B:
        raise ValueError(f"need at least B={B} pooled samples, got {pooled.shape[0]}")
    edges = np.unique(np.quantile(pooled, np.arange(1, B) / B))
    while edges.size:
        counts = np.bincount(np.searchsorted(edges, pooled, side="right"),
                             minlength=edges.size + 1)
        empty = np.flatnonzero(counts == 0)
        if not empty.size:
            break
        j = empty[0]
        edges = np.delete(edges, j - 1 if j > 0 else 0)
    if edges.size + 1 < B:
        warnings.warn(f"only {edges.size + 1} of {B} bins are non-degenerate; "
                      "duplicate edges were merged", DegenerateBins, stacklevel=2)
    return BinPartition(edges)


def score_datasets(source: Dataset, target: Dataset, l2_penalty: float = 1.0, seed: int = 0):
    """Attach IW scores, fitting a classifier unless both carry precomputed scores.

    Returns ``(source, target, classifier_or_None)``.
    """
    if source.iw_score is not None and target.iw_score is not None:
        return source, target, None
    clf = fit_domain_classifier(source, target, l2_penalty, seed)
    return (source.replace(iw_score=clf.score(source.features)),
            target.replace(iw_score=clf.score(target.features)), clf)
