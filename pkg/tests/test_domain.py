import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import spearmanr

from iwgae.domain import DomainClassifier, build_bins, fit_domain_classifier, iw_score, score_datasets
from iwgae.errors import DegenerateBins, MissingFeatures
from iwgae.synthetic import generate, make_spec, true_iw

from conftest import make_dataset


def _pair(xs, xt):
    xs, xt = np.atleast_2d(xs).reshape(len(xs), -1), np.atleast_2d(xt).reshape(len(xt), -1)
    src = make_dataset(np.zeros((len(xs), 2)), np.zeros(len(xs), int), features=xs)
    tgt = make_dataset(np.zeros((len(xt), 2)), domain="target", features=xt, prefix="t")
    return src, tgt


def test_identical_domains_give_flat_score(rng):
    x = rng.normal(size=(300, 2))
    clf = fit_domain_classifier(*_pair(x, x))
    s = clf.score(x)
    assert np.ptp(s) < 1e-6
    assert s.mean() == pytest.approx(1.0, abs=1e-6)


def test_separable_domains(rng):
    xs = rng.normal(-5, 0.1, 500)
    xt = rng.normal(5, 0.1, 500)
    clf = fit_domain_classifier(*_pair(xs, xt))
    hs, ht = rng.normal(-5, 0.1, 200), rng.normal(5, 0.1, 200)
    acc = np.mean(np.concatenate([clf.decision(hs[:, None]) < 0, clf.decision(ht[:, None]) > 0]))
    assert acc > 0.99


def test_huge_penalty_flattens_score(rng):
    src, tgt = _pair(rng.normal(size=(200, 2)), rng.normal(1, 1, size=(200, 2)))
    clf = fit_domain_classifier(src, tgt, l2_penalty=1e12)
    assert np.max(np.abs(clf.weights)) < 1e-6
    np.testing.assert_allclose(clf.score(src.features), clf.class_prior_ratio, rtol=1e-4)


def test_unequal_sizes_are_upsampled(rng):
    src, tgt = _pair(rng.normal(size=(100, 1)), rng.normal(size=(300, 1)))
    assert fit_domain_classifier(src, tgt).class_prior_ratio == 1.0


def test_missing_features():
    src = make_dataset(np.zeros((3, 2)), np.zeros(3, int))
    with pytest.raises(MissingFeatures):
        fit_domain_classifier(src, src)


@pytest.mark.parametrize("z, prior, expected", [(0.0, 1.0, 1.0), (math.log(2), 1.0, 2.0), (0.0, 0.5, 0.5)])
def test_iw_score_examples(z, prior, expected):
    clf = DomainClassifier(np.zeros(1), z, prior, 1.0)
    assert iw_score(clf, [0.0]) == pytest.approx(expected, rel=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-100, 100), min_size=2, max_size=20, unique=True))
def test_iw_score_monotone_and_positive(zs):
    clf = DomainClassifier(np.ones(1), 0.0, 1.3, 1.0)
    zs = np.sort(np.array(zs))
    s = clf.score(zs[:, None])
    assert np.all(np.isfinite(s)) and np.all(s > 0)
    inside = np.abs(zs) < 30
    z, v = zs[inside], s[inside]
    assert np.all(np.diff(v) >= 0)
    assert np.all(np.diff(v)[np.diff(z) > 1e-6] > 0)


def test_score_tracks_true_iw():
    spec = make_spec(0, shift=1.0)
    src, tgt, _ = generate(spec)
    src, tgt, clf = score_datasets(src, tgt)
    x = np.vstack([src.features, tgt.features])
    rho = spearmanr(clf.score(x), true_iw(spec, x))[0]
    assert rho > 0.9


def test_bins_examples():
    p = build_bins([1, 2], [3, 4], 2)
    assert np.bincount(p.index([1, 2, 3, 4]), minlength=2).tolist() == [2, 2]
    p = build_bins(np.arange(1, 51), np.arange(51, 101), 10)
    assert np.bincount(p.index(np.arange(1, 101))).tolist() == [10] * 10


def test_constant_scores_warn():
    with pytest.warns(DegenerateBins):
        p = build_bins(np.ones(10), np.ones(10), 10)
    assert p.B == 1


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(0.01, 100), min_size=12, max_size=60), st.integers(2, 12))
def test_bins_partition_pooled_scores(scores, B):
    scores = np.array(scores)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", DegenerateBins)
        p = build_bins(scores[::2], scores[1::2], B)
    idx = p.index(scores)
    assert p.B <= B
    assert np.all((idx >= 0) & (idx < p.B))
    assert np.all(np.bincount(idx, minlength=p.B) >= 1)
