"""Acceptance criteria, each at its stated tolerance and time budget.

Every test records a one-line verdict that is printed in the terminal
summary. Thresholds are never loosened to make a criterion pass.
"""

import filecmp
import logging
import time

import numpy as np
import pytest
from scipy.stats import spearmanr

from iwgae.ci import clopper_pearson, iw_intervals
from iwgae.cli import main
from iwgae.domain import build_bins, fit_domain_classifier
from iwgae.estimators import (
    SELECTION_METHODS, calibrate, diagnostics, ece, score_model,
)
from iwgae.grouping import assign_groups
from iwgae.io import write_csv
from iwgae.optimizer import COUPLING_ATOL, PROB_ATOL, check_constraints, eps_opt
from iwgae.pipeline import run_iwgae, run_iwmid
from iwgae.synthetic import generate, linear_score_bin_weights, make_spec, model_family
from iwgae.types import GaeConfig

from conftest import record
from oracles import grid_eps_oracle

pytestmark = pytest.mark.acceptance


@pytest.fixture(autouse=True)
def quiet():
    # per-bin singleton fallbacks log warnings on purpose; keep the run readable
    logging.disable(logging.WARNING)
    yield
    logging.disable(logging.NOTSET)


def test_1_clopper_pearson_closed_form():
    t0 = time.perf_counter()
    worst = 0.0
    for m in (5, 10, 50):
        for delta in (0.01, 0.025, 0.05):
            worst = max(worst, abs(clopper_pearson(0, m, delta).upper - (1 - delta ** (1 / m))))
    bounds = all(clopper_pearson(m, m, d).upper == 1.0 and clopper_pearson(0, m, d).lower == 0.0
                 for m in (5, 10, 50) for d in (0.01, 0.025, 0.05))
    dt = time.perf_counter() - t0
    ok = worst < 1e-9 and bounds and dt < 1.0
    assert record(1, ok, f"max |upper - (1 - delta^(1/m))| = {worst:.2e} (< 1e-9), "
                         f"boundaries exact = {bounds}, {dt:.3f}s (< 1s)")


def test_2_binomial_coverage():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    ks = rng.binomial(50, 0.3, 1000)
    hits = 0
    for k in ks:
        ci = clopper_pearson(int(k), 50, 0.025)
        hits += ci.lower <= 0.3 <= ci.upper
    dt = time.perf_counter() - t0
    ok = hits >= 930 and dt < 5.0
    assert record(2, ok, f"coverage {hits / 10:.1f}% over 1000 trials (>= 93%), {dt:.2f}s (< 5s)")


def test_3_binned_iw_coverage():
    cfg = GaeConfig()
    t0 = time.perf_counter()
    inside, raw_inside = [], []
    for seed in range(100):
        spec = make_spec(seed, d=2, shift=1.0, N=2000)
        src, tgt, _ = generate(spec)
        clf = fit_domain_classifier(src, tgt, cfg.l2_penalty, seed)
        ss, ts = clf.score(src.features), clf.score(tgt.features)
        part = build_bins(ss, ts, cfg.B)
        ivs = iw_intervals(part.index(ss), part.index(ts), part.B, cfg)
        # exact bin masses: the score is monotone in a Gaussian projection
        w_star = linear_score_bin_weights(spec, clf.weights, clf.bias, clf.class_prior_ratio,
                                          part.edges)
        inside.append(int(ivs.contains(w_star).sum()))
        raw_inside.append(int(ivs.contains(w_star, raw=True).sum()))
    dt = time.perf_counter() - t0
    mean = float(np.mean(inside))
    ok = mean >= 7.0 and dt < 120
    assert record(3, ok, f"mean {mean:.2f} of 10 bins contain w* (>= 7; "
                         f"{np.mean(raw_inside):.2f} before IW clipping), {dt:.1f}s (< 120s)")


def _bench_groups(n_groups):
    """Solved groups from synthetic-bench runs whose bin count cycles through 1, 2, 4 and 10."""
    out = []
    seed = 0
    while len(out) < n_groups:
        cfg = GaeConfig(B=(1, 2, 4, 10)[seed % 4])
        src, tgt, _ = generate(make_spec(seed, shift=1.5))
        res = run_iwgae(src, tgt, cfg)
        for n in sorted(res.search.solutions):
            out.append((cfg, res.search.counts[n], res.intervals, res.search.solutions[n]))
        seed += 1
    return out[:n_groups]


def test_4_optimizer_contract():
    t0 = time.perf_counter()
    violations, grid_checked, worst_gap, fallbacks = 0, 0, 0.0, 0
    for cfg, counts, ivs, sol in _bench_groups(100):
        rep = check_constraints(counts, ivs, sol.w_source, sol.w_target, cfg)
        fallbacks += sol.fallback
        good = (np.all(ivs.lower <= sol.w_source) and np.all(sol.w_source <= ivs.upper)
                and np.all(ivs.lower <= sol.w_target) and np.all(sol.w_target <= ivs.upper)
                and rep.coupling <= COUPLING_ATOL
                and ((rep.prob_source <= PROB_ATOL and rep.prob_target <= PROB_ATOL) or sol.fallback)
                and eps_opt(counts, sol.w_source, sol.w_target) <= sol.eps_midpoint)
        violations += not good
        if ivs.B <= 2:
            oracle = min(sol.eps_midpoint, grid_eps_oracle(counts, ivs.lower, ivs.upper, cfg))
            worst_gap = max(worst_gap, abs(sol.eps_opt - oracle))
            grid_checked += 1
    dt = time.perf_counter() - t0
    ok = violations == 0 and grid_checked > 0 and worst_gap <= 1e-4 and dt < 300
    assert record(4, ok, f"{violations} contract violations in 100 synthetic groups ({fallbacks} "
                         f"flagged fallbacks), worst grid gap {worst_gap:.1e} over {grid_checked} "
                         f"B<=2 groups (<= 1e-4), {dt:.1f}s (< 300s)")


def test_5_iwgae_beats_iwmid_and_vanilla():
    cfg = GaeConfig()
    t0 = time.perf_counter()
    rows = []
    for seed in range(20):
        src, tgt, truth = generate(make_spec(seed, shift=1.5))
        correct = tgt.predictions == truth.target_labels
        gae = ece(calibrate(run_iwgae(src, tgt, cfg)).confidence, correct).ece
        mid = ece(calibrate(run_iwmid(src, tgt, cfg)).confidence, correct).ece
        van = ece(tgt.confidences(), correct).ece
        rows.append((gae, mid, van))
    dt = time.perf_counter() - t0
    a = np.array(rows)
    g, m, v = a.mean(axis=0)
    wins = float(np.mean(a[:, 0] < a[:, 1]))
    ok = g <= m and g < v and wins >= 0.55 and dt < 600
    assert record(5, ok, f"mean ECE IW-GAE {g:.4f}, IW-Mid {m:.4f}, Vanilla {v:.4f}; "
                         f"IW-GAE < IW-Mid in {wins:.0%} of 20 seeds (>= 55%), {dt:.0f}s (< 600s)")


def test_6_model_selection():
    cfg = GaeConfig()
    t0 = time.perf_counter()
    best, picks, beats = [], {m: [] for m in SELECTION_METHODS}, 0
    for seed in range(20):
        accs, scores = [], {m: [] for m in SELECTION_METHODS}
        for i, spec in enumerate(model_family(seed, n_models=5, shift=1.5)):
            src, tgt, truth = generate(spec)
            _, cp = truth.sample("target", 200_000, 0)
            accs.append(cp.mean())
            got = score_model(f"m{i}", tgt, src, cfg)
            for m in SELECTION_METHODS:
                scores[m].append(got[m])
        accs = np.array(accs)
        best.append(accs.max())
        for m in SELECTION_METHODS:
            picks[m].append(accs[int(np.nanargmax(scores[m]))])
        beats += picks["iw-gae"][-1] >= picks["iwcv"][-1]
    dt = time.perf_counter() - t0
    mean = {m: float(np.mean(v)) for m, v in picks.items()}
    regret = {m: float(np.mean(best) - mean[m]) for m in mean}
    ok = mean["iw-gae"] >= mean["iwcv"] and regret["iw-gae"] < regret["vanilla"] and dt < 600
    assert record(6, ok, f"mean true accuracy of pick: IW-GAE {mean['iw-gae']:.4f}, "
                         f"IWCV {mean['iwcv']:.4f}, IW-Mid {mean['iw-mid']:.4f}, "
                         f"Vanilla {mean['vanilla']:.4f}; regret IW-GAE {regret['iw-gae']:.4f} vs "
                         f"Vanilla {regret['vanilla']:.4f}; IW-GAE >= IWCV in {beats}/20 seeds, "
                         f"{dt:.0f}s (< 600s)")


def test_7_bound_diagnostics():
    cfg = GaeConfig()
    t0 = time.perf_counter()
    rows = []
    for seed in range(40):
        src, tgt, truth = generate(make_spec(seed))
        res = run_iwgae(src, tgt, cfg)
        pop_s, cp_s = truth.sample("source", 1_000_000, 1)
        pop_t, cp_t = truth.sample("target", 1_000_000, 2)
        for g in diagnostics(res, pop_s, pop_t, cp_s, cp_t):
            rows.append((g.eps_opt, g.src_err, g.tgt_err, g.prop1, g.eq5))
    dt = time.perf_counter() - t0
    a = np.array(rows, dtype=float)
    prop1, eq5 = a[:, 3].mean(), a[:, 4].mean()
    rho_st = spearmanr(a[:, 1], a[:, 2])[0]
    rho_es = spearmanr(a[:, 0], a[:, 1])[0]
    ok = (len(a) >= 200 and prop1 >= 0.9 and eq5 >= 0.9 and rho_st > 0.5 and rho_es > 0.3
          and dt < 600)
    assert record(7, ok, f"{len(a)} pairs; source-gap bound (prop1) holds {prop1:.1%} (>= 90%), "
                         f"target transfer bound (eq5) {eq5:.1%} (>= 90%), Spearman(src_err, tgt_err) "
                         f"{rho_st:.3f} (> 0.5), Spearman(eps_opt, src_err) {rho_es:.3f} (> 0.3), "
                         f"{dt:.0f}s (< 600s)")


@pytest.mark.filterwarnings("ignore::iwgae.errors.DegenerateBins")
def test_8_no_shift_fixed_point():
    cfg = GaeConfig(fixed_weight=1.0)
    worst, ece_gap = 0.0, -np.inf
    for seed in range(5):
        src, _, _ = generate(make_spec(seed, shift=0.0))
        tgt = src.replace(domain=np.array(["target"] * len(src), dtype=object),
                          split=np.array(["test"] * len(src), dtype=object))
        res = run_iwgae(src, tgt, cfg)
        conf = calibrate(res)
        groups = assign_groups(src, cfg.M)
        for n, est in res.estimates.items():
            if not est.skipped:
                m = groups == n
                worst = max(worst, float(np.max(np.abs(conf.confidence[m] - src.correct[m].mean()))))
        ece_gap = max(ece_gap, ece(conf.confidence, src.correct).ece
                      - ece(tgt.confidences(), src.correct).ece)
    ok = worst <= 1e-9 and ece_gap <= 1e-6
    assert record(8, ok, f"max |confidence - group source accuracy| {worst:.1e} (<= 1e-9), "
                         f"max ECE(IW-GAE) - ECE(Vanilla) {ece_gap:.4f} (<= 1e-6), 5 seeds")


def _run_all(root, threads):
    """Every CLI command once, writing under ``root``."""
    common = ["--seed", "11", "--threads", str(threads)]
    syn = root / "synth"
    assert main(["synth", "--n", "600", "--out", str(syn), "--target-logit-scale", "0.9", *common]) == 0
    for p in (0.0, 0.4):
        assert main(["synth", "--n", "600", "--perturb", str(p), "--out", str(root / f"m{p}"),
                     *common]) == 0
    feats = ["--source-features", str(syn / "source_features.csv"),
             "--target-features", str(syn / "target_features.csv")]
    assert main(["calibrate", "--source", str(syn / "source.csv"),
                 "--target", str(syn / "target_labeled.csv"), *feats,
                 "--out", str(root / "cal"), *common]) == 0
    assert main(["evaluate", "--target", str(syn / "target_labeled.csv"),
                 "--confidences", str(root / "cal" / "confidences.csv"),
                 "--out", str(root / "eval"), *common]) == 0
    write_csv(root / "cands.csv", ["model_id", "source", "target", "source_features", "target_features"],
              [(f"m{p}", f"m{p}/source.csv", f"m{p}/target.csv", f"m{p}/source_features.csv",
                f"m{p}/target_features.csv") for p in (0.0, 0.4)])
    assert main(["select", str(root / "cands.csv"), "--out", str(root / "sel"), *common]) == 0
    assert main(["diagnose", str(syn), str(root / "m0.0"), "--out", str(root / "diag"), *common]) == 0


def test_9_cli_determinism(tmp_path, capsys):
    runs = [(tmp_path / "a", 1), (tmp_path / "b", 1), (tmp_path / "c", 4)]
    for root, threads in runs:
        root.mkdir()
        _run_all(root, threads)
    capsys.readouterr()
    files = sorted(p.relative_to(runs[0][0]) for p in runs[0][0].rglob("*.csv"))
    differ = []
    for root, _ in runs[1:]:
        match, mismatch, errors = filecmp.cmpfiles(runs[0][0], root, [str(f) for f in files],
                                                   shallow=False)
        differ += mismatch + errors
    manifests = len(list(runs[0][0].rglob("manifest.json")))
    ok = not differ and len(files) > 0 and manifests == 7
    assert record(9, ok, f"{len(files)} output CSVs from 7 commands byte-identical across 3 runs "
                         f"(threads 1, 1, 4); {len(differ)} differ; manifests excluded")
