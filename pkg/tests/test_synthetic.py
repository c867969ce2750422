import dataclasses
import math

import numpy as np
import pytest

from iwgae.domain import build_bins
from iwgae.synthetic import (
    SyntheticSpec, bayes_classifier, generate, label_probs, linear_score_bin_weights, make_spec,
    model_family, oracle_group_accuracy, true_bin_weights, true_iw,
)


def spec_1d(mu_T=1.0, **kw):
    W, b = bayes_classifier([[-1.0], [1.0]])
    base = dict(mu_S=[0.0], mu_T=[mu_T], sigma=1.0, class_centers=[[-1.0], [1.0]],
                classifier_weights=W, classifier_bias=b)
    base.update(kw)
    return SyntheticSpec(**base)


def test_true_iw_examples():
    assert true_iw(spec_1d(), [[1.0]])[0] == pytest.approx(math.exp(0.5), rel=1e-12)
    assert true_iw(spec_1d(), [[0.5]])[0] == pytest.approx(1.0)
    x = np.random.default_rng(0).normal(size=(20, 1))
    np.testing.assert_array_equal(true_iw(spec_1d(mu_T=0.0), x), 1.0)


def test_spec_validation():
    with pytest.raises(ValueError):
        spec_1d(sigma=0.0)
    with pytest.raises(ValueError):
        spec_1d(noise=0.5)
    with pytest.raises(ValueError):
        spec_1d(mu_T=[1.0, 2.0])


def test_oracle_accuracy_examples():
    far = np.full((50, 1), 8.0)
    assert oracle_group_accuracy(generate(spec_1d(noise=0.0))[2], far) == pytest.approx(1.0, abs=1e-12)
    truth = generate(spec_1d(noise=0.5 - 1e-9))[2]
    assert oracle_group_accuracy(truth, np.random.default_rng(1).normal(size=(100, 1))) == pytest.approx(0.5, abs=1e-8)
    # flip rate 0.3 at a point the class-1 softmax owns completely
    assert oracle_group_accuracy(generate(spec_1d(noise=0.3))[2], [[30.0]]) == pytest.approx(0.7, abs=1e-12)
    with pytest.raises(ValueError):
        oracle_group_accuracy(truth, np.empty((0, 1)))


def test_label_probs_rows_sum_to_one():
    spec = make_spec(3, d=4, K=5)
    p = label_probs(spec, np.random.default_rng(0).normal(size=(100, 4)))
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)


def test_concept_invariance():
    spec = make_spec(0, shift=1.5, N=20000)
    other = dataclasses.replace(spec, mu_T=-spec.mu_T)
    x = np.random.default_rng(2).normal(size=(50, 2))
    np.testing.assert_array_equal(label_probs(spec, x), label_probs(other, x))
    # labels drawn on the two sides agree with the same conditional where the domains overlap
    src, tgt, truth = generate(spec)
    tgt_labels = truth.target_labels
    mid = 0.5 * (spec.mu_S + spec.mu_T)
    for data, labels in ((src, src.labels), (tgt, tgt_labels)):
        near = np.linalg.norm(data.features - mid, axis=1) < 0.5
        p = label_probs(spec, data.features[near])
        for k in range(spec.K):
            obs = np.mean(labels[near] == k)
            exp = p[:, k].mean()
            se = math.sqrt(exp * (1 - exp) / near.sum())
            assert abs(obs - exp) < 4 * se + 1e-12


def test_seeded_determinism():
    a = generate(make_spec(9))
    b = generate(make_spec(9))
    np.testing.assert_array_equal(a[0].features, b[0].features)
    np.testing.assert_array_equal(a[1].logits, b[1].logits)
    np.testing.assert_array_equal(a[2].target_labels, b[2].target_labels)
    assert (a[1].labels == -1).all()
    assert not np.array_equal(a[0].features, generate(make_spec(10))[0].features)


def test_model_family_shares_data():
    specs = model_family(4, n_models=3)
    d = [generate(s) for s in specs]
    np.testing.assert_array_equal(d[0][0].features, d[2][0].features)
    np.testing.assert_array_equal(d[0][2].target_labels, d[2][2].target_labels)
    assert not np.array_equal(d[0][0].logits, d[2][0].logits)


def test_monte_carlo_bin_weights_match_exact():
    spec = make_spec(1, shift=1.0)
    w = np.array([0.8, -0.3])
    score = lambda x: np.exp(x @ w + 0.1)
    rng = np.random.default_rng(0)
    edges = build_bins(score(rng.normal(size=(2000, 2))),
                       score(spec.mu_T + rng.normal(size=(2000, 2))), 10).edges
    exact = linear_score_bin_weights(spec, w, 0.1, 1.0, edges)
    mc = true_bin_weights(spec, edges, n=1_000_000, seed=3, scores_fn=score)
    np.testing.assert_allclose(mc, exact, rtol=0.02)


def test_exact_bin_weights_with_true_iw_scores():
    # the analytic IW is itself a linear score with weights mu_T - mu_S
    spec = make_spec(2, shift=1.0)
    edges = np.array([0.5, 1.0, 2.0])
    w = spec.mu_T - spec.mu_S
    bias = (spec.mu_S @ spec.mu_S - spec.mu_T @ spec.mu_T) / 2
    mc = true_bin_weights(spec, edges, n=1_000_000, seed=1)
    np.testing.assert_allclose(mc, linear_score_bin_weights(spec, w, bias, 1.0, edges), rtol=0.02)
