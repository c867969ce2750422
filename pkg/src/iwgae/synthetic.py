"""Gaussian covariate-shift problems with analytic importance weights and accuracies.

Inputs are drawn from ``N(mu_S, sigma^2 I)`` on the source side and
``N(mu_T, sigma^2 I)`` on the target side. Labels follow a softmax over
negative squared distances to the class centers, passed through a symmetric
label flip at rate ``noise``; the conditional depends on ``x`` alone, so the
shift is purely covariate. Predictions come from a fixed linear classifier.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np
from scipy.stats import norm

from .types import Dataset, softmax


@dataclass(frozen=True, eq=False)
class SyntheticSpec:
    mu_S: np.ndarray
    mu_T: np.ndarray
    sigma: float
    class_centers: np.ndarray  # (K, d)
    classifier_weights: np.ndarray  # (K, d)
    classifier_bias: np.ndarray  # (K,)
    noise: float = 0.0
    N_S: int = 2000
    N_T: int = 2000
    seed: int = 0
    # target logits are multiplied by this; 1 leaves them untouched
    target_logit_scale: float = 1.0

    def __post_init__(self):
        for name in ("mu_S", "mu_T", "class_centers", "classifier_weights", "classifier_bias"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float))
        d = self.mu_S.shape[0]
        K = self.class_centers.shape[0]
        if self.mu_S.ndim != 1 or self.mu_T.shape != (d,):
            raise ValueError("mu_S and mu_T must be d-vectors of equal length")
        if self.class_centers.shape != (K, d) or K < 2:
            raise ValueError("class_centers must be (K, d) with K >= 2")
        if self.classifier_weights.shape != (K, d) or self.classifier_bias.shape != (K,):
            raise ValueError("classifier must have (K, d) weights and K biases")
        if not self.sigma > 0:
            raise ValueError("sigma must be positive")
        if not 0 <= self.noise < 0.5:
            raise ValueError("noise must lie in [0, 0.5)")
        if self.N_S < 1 or self.N_T < 1:
            raise ValueError("N_S and N_T must be positive")
        if not self.target_logit_scale > 0:
            raise ValueError("target_logit_scale must be positive")

    @property
    def d(self) -> int:
        return self.mu_S.shape[0]

    @property
    def K(self) -> int:
        return self.class_centers.shape[0]


def bayes_classifier(centers) -> tuple[np.ndarray, np.ndarray]:
    """Linear logits equal, up to a per-row constant, to ``-||x - c_k||^2``."""
    c = np.asarray(centers, dtype=float)
    return 2.0 * c, -np.sum(c * c, axis=1)


def make_spec(seed: int = 0, d: int = 2, K: int = 3, shift: float = 1.0, N: int = 2000,
              noise: float = 0.1, logit_scale: float = 2.0, perturb: float = 0.3,
              radius: float = 1.5, target_logit_scale: float = 1.0) -> SyntheticSpec:
    """A random problem: centers on a sphere, a shifted target mean, a perturbed classifier.

    The classifier is the Bayes rule with relative weight noise ``perturb``,
    scaled by ``logit_scale`` (values above 1 make it overconfident).
    """
    rng = np.random.default_rng([seed, 7919])
    centers = rng.normal(size=(K, d))
    centers *= radius / np.linalg.norm(centers, axis=1, keepdims=True)
    direction = rng.normal(size=d)
    direction /= np.linalg.norm(direction)
    W, b = bayes_classifier(centers)
    W = W + perturb * np.linalg.norm(W, axis=1, keepdims=True) * rng.normal(size=W.shape) / np.sqrt(d)
    b = b + perturb * rng.normal(size=K)
    return SyntheticSpec(mu_S=np.zeros(d), mu_T=shift * direction, sigma=1.0, class_centers=centers,
                         classifier_weights=logit_scale * W, classifier_bias=logit_scale * b,
                         noise=noise, N_S=N, N_T=N, seed=seed, target_logit_scale=target_logit_scale)


def model_family(seed: int = 0, n_models: int = 5, perturbs=None, scales=None,
                 **kwargs) -> list[SyntheticSpec]:
    """Specs sharing data and labels but differing in their classifier.

    Model ``i`` perturbs the Bayes rule by ``perturbs[i]`` (evenly spaced in
    ``[0, 0.5]`` by default) in a direction drawn per model, and multiplies
    its logits by ``scales[i]`` (drawn from ``[1, 3]`` by default), so the
    models differ in both accuracy and overconfidence.
    """
    rng = np.random.default_rng([seed, 2999])
    perturbs = np.linspace(0.0, 0.5, n_models) if perturbs is None else np.asarray(perturbs, float)
    scales = rng.uniform(1.0, 3.0, n_models) if scales is None else np.asarray(scales, float)
    base = make_spec(seed, perturb=0.0, logit_scale=1.0, **kwargs)
    W0 = base.classifier_weights
    b0 = base.classifier_bias
    specs = []
    for p, c in zip(perturbs, scales):
        dW = rng.normal(size=W0.shape) * np.linalg.norm(W0, axis=1, keepdims=True) / np.sqrt(base.d)
        db = rng.normal(size=b0.shape) * np.abs(b0).mean()
        specs.append(dataclasses.replace(base, classifier_weights=c * (W0 + p * dW),
                                         classifier_bias=c * (b0 + p * db)))
    return specs


@dataclass(frozen=True, eq=False)
class SyntheticTruth:
    """Oracle handle: analytic density ratio and conditional correctness."""

    spec: SyntheticSpec
    source_correct_prob: np.ndarray
    target_correct_prob: np.ndarray
    target_labels: np.ndarray

    def true_iw(self, x) -> np.ndarray:
        return true_iw(self.spec, x)

    def label_probs(self, x) -> np.ndarray:
        return label_probs(self.spec, x)

    def correct_prob(self, x) -> np.ndarray:
        return correct_prob(self.spec, x)

    def sample(self, domain: str, n: int, seed: int) -> tuple[Dataset, np.ndarray]:
        """Fresh labeled draws with their exact correctness probabilities."""
        rng = np.random.default_rng([self.spec.seed, seed, 1 if domain == "target" else 0, 104729])
        data = _draw(self.spec, domain, n, rng, prefix=f"{domain[0]}p")
        return data, correct_prob(self.spec, data.features)


def true_iw(spec: SyntheticSpec, x) -> np.ndarray:
    """``p_T(x) / p_S(x)`` for the two isotropic Gaussians."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    num = np.sum((x - spec.mu_S) ** 2, axis=1) - np.sum((x - spec.mu_T) ** 2, axis=1)
    return np.exp(num / (2.0 * spec.sigma ** 2))


def label_probs(spec: SyntheticSpec, x) -> np.ndarray:
    """``P(Y = k | x)``: distance softmax followed by a symmetric flip at rate ``noise``."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    d2 = np.sum((x[:, None, :] - spec.class_centers[None, :, :]) ** 2, axis=2)
    p = softmax(-d2)
    nu, K = spec.noise, spec.K
    return (1.0 - nu) * p + nu * (1.0 - p) / (K - 1)


def classifier_logits(spec: SyntheticSpec, x) -> np.ndarray:
    x = np.atleast_2d(np.asarray(x, dtype=float))
    return x @ spec.classifier_weights.T + spec.classifier_bias


def correct_prob(spec: SyntheticSpec, x) -> np.ndarray:
    """``P(Y = yhat(x) | x)`` with ``yhat`` the classifier's argmax."""
    probs = label_probs(spec, x)
    pred = np.argmax(classifier_logits(spec, x), axis=1)
    return probs[np.arange(probs.shape[0]), pred]


def _draw(spec: SyntheticSpec, domain: str, n: int, rng, prefix: str) -> Dataset:
    mu = spec.mu_S if domain == "source" else spec.mu_T
    x = mu + spec.sigma * rng.normal(size=(n, spec.d))
    probs = label_probs(spec, x)
    u = rng.random(n)[:, None]
    labels = np.minimum((u > np.cumsum(probs, axis=1)).sum(axis=1), spec.K - 1)
    logits = classifier_logits(spec, x)
    if domain == "target":
        logits = logits * spec.target_logit_scale
    split = "validation" if domain == "source" else "test"
    width = len(str(n - 1))
    ids = [f"{prefix}{i:0{width}d}" for i in range(n)]
    return Dataset(ids=ids, domain=[domain] * n, split=[split] * n, labels=labels,
                   logits=logits, features=x)


def generate(spec: SyntheticSpec) -> tuple[Dataset, Dataset, SyntheticTruth]:
    """Draw a labeled source set and a target set whose labels are kept in ``truth``."""
    rng = np.random.default_rng(spec.seed)
    source = _draw(spec, "source", spec.N_S, rng, "s")
    target = _draw(spec, "target", spec.N_T, rng, "t")
    truth = SyntheticTruth(spec, correct_prob(spec, source.features),
                           correct_prob(spec, target.features), target.labels)
    hidden = target.replace(labels=np.full(len(target), -1))
    return source, hidden, truth


def oracle_group_accuracy(truth: SyntheticTruth, x) -> float:
    """Mean exact correctness probability over the given inputs."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    if x.shape[0] == 0:
        raise ValueError("need at least one sample")
    return float(np.mean(truth.correct_prob(x)))


def true_bin_weights(spec: SyntheticSpec, edges, n: int = 1_000_000, seed: int = 0,
                     scores_fn=None) -> np.ndarray:
    """Binned IW ``P_T(bin) / P_S(bin)`` from ``n`` draws per domain.

    Bins are over ``scores_fn(x)`` (the analytic IW by default) with the given
    inner edges, matching ``BinPartition.index``.
    """
    rng = np.random.default_rng([seed, 15485863])
    scores_fn = scores_fn or (lambda x: true_iw(spec, x))
    edges = np.asarray(edges, dtype=float)
    B = edges.size + 1
    out = []
    for mu in (spec.mu_S, spec.mu_T):
        counts = np.zeros(B)
        left = n
        while left > 0:
            m = min(left, 200_000)
            x = mu + spec.sigma * rng.normal(size=(m, spec.d))
            counts += np.bincount(np.searchsorted(edges, scores_fn(x), side="right"), minlength=B)
            left -= m
        out.append(counts / n)
    p_s, p_t = out
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(p_s > 0, p_t / p_s, np.inf)


def linear_score_bin_weights(spec: SyntheticSpec, weights, bias: float, prior_ratio: float,
                             edges) -> np.ndarray:
    """Exact binned IW when bins are over ``prior_ratio * exp(weights @ x + bias)``.

    The score is monotone in the projection ``weights @ x``, which is
    Gaussian in both domains, so each bin's mass is a normal CDF difference.
    """
    w = np.asarray(weights, dtype=float)
    edges = np.asarray(edges, dtype=float)
    z_edges = np.log(edges / prior_ratio) - bias
    scale = spec.sigma * np.linalg.norm(w)
    cuts = np.concatenate([[-np.inf], z_edges, [np.inf]])
    mass = []
    for mu in (spec.mu_S, spec.mu_T):
        if scale == 0:
            # every sample falls in the bin holding the constant score
            m = np.zeros(edges.size + 1)
            m[np.searchsorted(z_edges, 0.0, side="right")] = 1.0
        else:
            m = np.diff(norm.cdf((cuts - w @ mu) / scale))
        mass.append(m)
    p_s, p_t = mass
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(p_s > 0, p_t / p_s, np.inf)


__all__ = [
    "SyntheticSpec", "SyntheticTruth", "bayes_classifier", "classifier_logits", "correct_prob",
    "generate", "label_probs", "linear_score_bin_weights", "model_family", "make_spec", "oracle_group_accuracy", "true_bin_weights", "true_iw",
]
