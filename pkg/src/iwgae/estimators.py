"""Confidences, ECE, model-selection scores, baselines and bound diagnostics."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.special import log_softmax

from .errors import IwGaeError, LengthMismatch, MissingLabels
from .domain import score_datasets
from .grouping import assign_groups
from .pipeline import GaeResult, run_iwgae, run_iwmid
from .types import Dataset, GaeConfig, max_softmax, softmax

log = logging.getLogger(__name__)

T_RANGE = (0.05, 20.0)
T_TOL = 1e-4
HOEFFDING_DELTA = 0.05


@dataclass(frozen=True, eq=False)
class Confidences:
    """Per-sample confidences of one method, aligned with the target rows."""

    method: str
    ids: np.ndarray
    confidence: np.ndarray
    fallback: np.ndarray

    def as_map(self) -> dict[str, float]:
        return dict(zip(self.ids.tolist(), self.confidence.tolist()))

    def rows(self):
        for i, c, f in zip(self.ids, self.confidence, self.fallback):
            yield str(i), self.method, float(c), bool(f)


def calibrate(result: GaeResult, target: Dataset | None = None) -> Confidences:
    """Give every target sample the estimated accuracy of its group.

    Samples in skipped groups keep their vanilla softmax confidence and are
    flagged. ``target`` defaults to the data the result was fitted on; any
    other set is grouped at the selected temperature.
    """
    if target is None:
        target, groups = result.target, result.target_groups
    else:
        groups = assign_groups(target, result.config.M, result.t)
    conf = target.confidences(1.0).copy()
    fallback = np.ones(len(target), dtype=bool)
    for n, est in result.estimates.items():
        if est.skipped:
            continue
        mask = groups == n
        conf[mask] = est.alpha_hat_T
        fallback[mask] = False
    if fallback.any():
        log.info("%s: %d samples in skipped groups use vanilla confidence",
                 result.method, int(fallback.sum()))
    return Confidences(result.method, target.ids, conf, fallback)


@dataclass(frozen=True, eq=False)
class CalibrationReport:
    method: str
    ece: float
    counts: np.ndarray
    mean_confidence: np.ndarray  # NaN in empty bins
    mean_accuracy: np.ndarray

    @property
    def m(self) -> int:
        return self.counts.shape[0]

    def rows(self):
        for j in range(self.m):
            yield self.method, j, int(self.counts[j]), float(self.mean_confidence[j]), float(self.mean_accuracy[j])


def ece_bin_index(confidences, m: int) -> np.ndarray:
    """Equal-width bin of each confidence; bin ``j`` is ``[j/m, (j+1)/m)``, 1.0 in the last."""
    c = np.asarray(confidences, dtype=float)
    return np.clip(np.floor(c * m).astype(np.int64), 0, m - 1)


def ece(confidences, correct, m: int = 15, method: str = "") -> CalibrationReport:
    """Expected calibration error over ``m`` equal-width confidence bins."""
    c = np.asarray(confidences, dtype=float).reshape(-1)
    y = np.asarray(correct, dtype=float).reshape(-1)
    if c.shape != y.shape:
        raise LengthMismatch(f"{c.shape[0]} confidences vs {y.shape[0]} correctness values")
    if m < 1:
        raise ValueError("m must be >= 1")
    if c.size == 0:
        raise ValueError("need at least one sample")
    idx = ece_bin_index(c, m)
    counts = np.bincount(idx, minlength=m)
    sum_c = np.bincount(idx, weights=c, minlength=m)
    sum_y = np.bincount(idx, weights=y, minlength=m)
    with np.errstate(invalid="ignore", divide="ignore"):
        conf = np.where(counts > 0, sum_c / np.maximum(counts, 1), np.nan)
        acc = np.where(counts > 0, sum_y / np.maximum(counts, 1), np.nan)
    gaps = np.abs(sum_y - sum_c)  # count * |acc - conf|
    return CalibrationReport(method, float(gaps.sum() / c.size), counts, conf, acc)


# Temperature-scaling baselines

def golden_section(f: Callable[[float], float], lo: float, hi: float, tol: float = T_TOL) -> float:
    """Minimizer of a unimodal ``f`` on ``[lo, hi]`` to bracket width ``tol``."""
    invphi = (math.sqrt(5.0) - 1.0) / 2.0
    a, b = lo, hi
    c = b - invphi * (b - a)
    d = a + invphi * (b - a)
    fc, fd = f(c), f(d)
    while b - a > tol:
        if fc <= fd:
            b, d, fd = d, c, fc
            c = b - invphi * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + invphi * (b - a)
            fd = f(d)
    return 0.5 * (a + b)


def _require_labels(data: Dataset, what: str):
    if not data.has_labels:
        raise MissingLabels(f"{what} needs a fully labeled source validation set")


def _weighted_nll(logits, labels, w):
    def f(t):
        lp = log_softmax(logits / t, axis=1)
        return -float(np.sum(w * lp[np.arange(len(labels)), labels]) / np.sum(w))
    return f


def _weighted_brier(logits, labels, w):
    onehot = np.eye(logits.shape[1])[labels]

    def f(t):
        err = np.sum((softmax(logits, t) - onehot) ** 2, axis=1)
        return float(np.sum(w * err) / np.sum(w))
    return f


def clipped_weights(data: Dataset, cfg: GaeConfig) -> np.ndarray:
    if data.iw_score is None:
        raise ValueError("importance-weighted baselines need iw_score")
    return np.clip(data.iw_score, cfg.w_min, cfg.w_max)


def fit_temperature(source_val: Dataset, criterion: str = "nll", weights=None) -> float:
    """Scalar temperature minimizing weighted NLL or Brier score on labeled data."""
    _require_labels(source_val, "temperature fitting")
    w = np.ones(len(source_val)) if weights is None else np.asarray(weights, dtype=float)
    if w.shape[0] != len(source_val):
        raise LengthMismatch("one weight per source sample required")
    make = {"nll": _weighted_nll, "brier": _weighted_brier}[criterion]
    return golden_section(make(source_val.logits, source_val.labels, w), *T_RANGE)


def _scaled(method: str, target: Dataset, t: float) -> Confidences:
    conf, _ = max_softmax(target.logits, t)
    return Confidences(method, target.ids, conf, np.zeros(len(target), dtype=bool))


def baseline_vanilla(source_val: Dataset | None, target: Dataset) -> Confidences:
    return _scaled("vanilla", target, 1.0)


def baseline_ts(source_val: Dataset, target: Dataset) -> Confidences:
    return _scaled("ts", target, fit_temperature(source_val, "nll", None))


def baseline_iwts(source_val: Dataset, target: Dataset, weights) -> Confidences:
    return _scaled("iw-ts", target, fit_temperature(source_val, "nll", weights))


def baseline_cpcs(source_val: Dataset, target: Dataset, weights) -> Confidences:
    return _scaled("cpcs", target, fit_temperature(source_val, "brier", weights))


def baseline_iwmid(source_val: Dataset, target: Dataset, cfg: GaeConfig | None = None) -> Confidences:
    return calibrate(run_iwmid(source_val, target, cfg))


def baseline_iwcv(source_val: Dataset, weights) -> float:
    """One minus the importance-weighted source validation error."""
    _require_labels(source_val, "IWCV")
    w = np.asarray(weights, dtype=float)
    if w.shape[0] != len(source_val):
        raise LengthMismatch("one weight per source sample required")
    wrong = ~source_val.correct
    return 1.0 - float(np.mean(w * wrong))


# Model selection

@dataclass(frozen=True)
class SelectionScore:
    model_id: str
    method: str
    score: float  # NaN when the model failed
    rank: int | None = None


def selection_score(result: GaeResult, weighted: bool | None = None) -> float:
    """Mean estimated group accuracy, weighted by target group sizes by default."""
    weighted = result.config.weighted_selection if weighted is None else weighted
    est = [e for e in result.estimates.values() if not e.skipped]
    if not est:
        raise IwGaeError("no solved groups")
    vals = np.array([e.alpha_hat_T for e in est])
    if not weighted:
        return float(vals.mean())
    w = np.array([e.target_count for e in est], dtype=float)
    return float(np.sum(w * vals) / w.sum())


def rank_scores(scores: Sequence[SelectionScore]) -> list[SelectionScore]:
    """Descending score order with model-id tie-break; failed models go last unranked."""
    ok = sorted((s for s in scores if not math.isnan(s.score)), key=lambda s: (-s.score, s.model_id))
    bad = sorted((s for s in scores if math.isnan(s.score)), key=lambda s: s.model_id)
    out = [SelectionScore(s.model_id, s.method, s.score, r) for r, s in enumerate(ok, start=1)]
    return out + [SelectionScore(s.model_id, s.method, s.score, None) for s in bad]


SELECTION_METHODS = ("iw-gae", "iw-mid", "iwcv", "vanilla")


def score_model(model_id: str, target: Dataset, source: Dataset, cfg: GaeConfig,
                methods: Sequence[str] = SELECTION_METHODS) -> dict[str, float]:
    """Selection score of one model under each method; NaN marks a failure."""
    unknown = set(methods) - set(SELECTION_METHODS)
    if unknown:
        raise ValueError(f"unknown selection method(s) {sorted(unknown)}")
    out = {}
    scored = None
    for method in methods:
        try:
            if method == "vanilla":
                out[method] = float(np.mean(target.confidences(1.0)))
            elif method == "iwcv":
                if scored is None:
                    scored = score_datasets(source, target, cfg.l2_penalty, cfg.seed)[0]
                out[method] = baseline_iwcv(scored, clipped_weights(scored, cfg))
            else:
                run = run_iwgae if method == "iw-gae" else run_iwmid
                res = run(source, target, cfg)
                scored = res.source
                out[method] = selection_score(res)
        except (IwGaeError, ValueError) as exc:
            log.warning("model %s, %s: %s", model_id, method, exc)
            out[method] = math.nan
    return out


def select(models: Sequence[tuple[str, Dataset, Dataset]], cfg: GaeConfig | None = None,
           method: str = "iw-gae") -> list[SelectionScore]:
    """Rank models ``(id, target, source)`` by one selection method."""
    if not models:
        raise ValueError("need at least one model")
    cfg = cfg or GaeConfig()
    scores = [SelectionScore(mid, method, score_model(mid, tgt, src, cfg, (method,))[method])
              for mid, tgt, src in models]
    return rank_scores(scores)


# Diagnostics

@dataclass(frozen=True)
class GroupDiagnostic:
    group: int
    eps_opt: float
    ident_bias: float
    eps_stat: float
    src_err: float
    tgt_err: float
    bias: float
    var: float
    # field names match the diagnostics.csv columns
    prop1: bool  # src_err <= eps_opt + ident_bias + eps_stat
    eq5: bool  # tgt_err <= w_max * src_err * (p_T / p_S)^2


def hoeffding_eps(n: int, delta: float = HOEFFDING_DELTA) -> float:
    return math.sqrt(math.log(2.0 / delta) / (2.0 * n))


def ident_bias(p_source: float, p_target: float, w_min: float, bias: float, var: float) -> float:
    """Bias of the identical-accuracy assumption, split into estimator bias and correctness variance."""
    return p_target / (2.0 * p_source) * (1.0 / w_min ** 2 + bias ** 2 + var)


def correctness_variance(beta, alpha: float) -> float:
    """``E[(1(Y = Yhat) - alpha)^2]`` when ``P(Y = Yhat | x) = beta(x)``."""
    beta = np.asarray(beta, dtype=float)
    return float(np.mean(beta * (1.0 - alpha) ** 2 + (1.0 - beta) * alpha ** 2))


def diagnostics(result: GaeResult, eval_source: Dataset, eval_target: Dataset,
                source_correct_prob=None, target_correct_prob=None) -> list[GroupDiagnostic]:
    """Per-group bound quantities against labeled evaluation data.

    ``eval_source`` and ``eval_target`` carry the quantities treated as
    population truth: pass large fresh samples for Monte-Carlo oracles, or
    the fitted data itself. Correctness comes from the ``*_correct_prob``
    arrays when given (exact conditional probabilities) and from labels
    otherwise. Both sets are binned with the fitted partition, so they need
    ``iw_score``; if the result has a classifier they are scored with it.
    """
    cfg = result.config
    src, tgt = eval_source, eval_target
    if result.classifier is not None:
        if src.iw_score is None:
            src = src.replace(iw_score=result.classifier.score(src.features))
        if tgt.iw_score is None:
            tgt = tgt.replace(iw_score=result.classifier.score(tgt.features))
    if src.iw_score is None or tgt.iw_score is None:
        raise ValueError("evaluation sets need iw_score")
    beta_s = _correctness(src, source_correct_prob, "source")
    beta_t = _correctness(tgt, target_correct_prob, "target")
    sg = assign_groups(src, cfg.M, 1.0)
    tg = assign_groups(tgt, cfg.M, result.t)
    sb = result.partition.index(src.iw_score)
    tb = result.partition.index(tgt.iw_score)
    out = []
    for n, sol in sorted(result.search.solutions.items()):
        ms, mt = sg == n, tg == n
        if not ms.any() or not mt.any():
            log.info("group %d has no evaluation samples on one side; skipped", n)
            continue
        p_s, p_t = ms.mean(), mt.mean()
        alpha_s_true = float(beta_s[ms].mean())
        alpha_t_true = float(beta_t[mt].mean())
        # population forms of the two group accuracies under the solved weights
        alpha_s_sol = float(np.mean(beta_t[mt] / sol.w_target[tb[mt]])) * p_t / p_s
        alpha_t_sol = float(np.mean(sol.w_source[sb[ms]] * beta_s[ms])) * p_s / p_t
        src_err = abs(alpha_s_true - alpha_s_sol)
        tgt_err = abs(alpha_t_true - alpha_t_sol)
        est = result.estimates[n].alpha_hat_T
        bias = abs(alpha_t_true - est)
        var = correctness_variance(beta_t[mt], alpha_t_true)
        ib = ident_bias(p_s, p_t, sol.w_min, bias, var)
        e_stat = hoeffding_eps(result.search.counts[n].n_source)
        prop1 = src_err <= sol.eps_opt + ib + e_stat
        eq5 = tgt_err <= sol.w_max * src_err * (p_t / p_s) ** 2
        out.append(GroupDiagnostic(n, sol.eps_opt, ib, e_stat, src_err, tgt_err, bias, var,
                                   bool(prop1), bool(eq5)))
    return out


def _correctness(data: Dataset, prob, side: str) -> np.ndarray:
    if prob is not None:
        prob = np.asarray(prob, dtype=float)
        if prob.shape[0] != len(data):
            raise LengthMismatch(f"{side}: one correctness probability per sample required")
        return prob
    if not data.has_labels:
        raise MissingLabels(f"{side} evaluation set needs labels or correctness probabilities")
    return data.correct.astype(float)


__all__ = [
    "CalibrationReport", "Confidences", "GroupDiagnostic", "SelectionScore", "SELECTION_METHODS",
    "baseline_cpcs", "baseline_iwcv", "baseline_iwmid", "baseline_iwts",
    "baseline_ts", "baseline_vanilla", "calibrate", "clipped_weights", "correctness_variance",
    "diagnostics", "ece", "fit_temperature", "golden_section", "hoeffding_eps", "ident_bias",
    "rank_scores", "score_model", "select", "selection_score",
]
