"""Command-line front end: ``iwgae {calibrate,select,evaluate,diagnose,synth}``.

Exit codes: 0 success, 2 malformed input, 3 pipeline failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import math
import os
import sys
import tempfile
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .domain import score_datasets
from .errors import IwGaeError, LengthMismatch, SchemaError
from .estimators import (
    SELECTION_METHODS, SelectionScore, baseline_cpcs, baseline_iwts, baseline_ts, baseline_vanilla,
    calibrate, clipped_weights, diagnostics, ece, rank_scores, score_model,
)
from .io import fmt, load_config, read_csv_dicts, read_predictions, write_csv, write_predictions
from .pipeline import run_iwgae, run_iwmid
from .synthetic import generate, make_spec
from .types import Dataset, GaeConfig

log = logging.getLogger("iwgae")

EXIT_OK, EXIT_SCHEMA, EXIT_PIPELINE = 0, 2, 3
CALIBRATION_METHODS = ("iw-gae", "iw-mid", "vanilla", "ts", "iw-ts", "cpcs")


class PipelineFailure(Exception):
    pass


# Run manifest

def sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass
class RunManifest:
    command: str
    argv: list[str]
    config: dict
    seed: int
    inputs: dict[str, str] = field(default_factory=dict)
    outputs: list[str] = field(default_factory=list)
    tool_version: str = __version__
    started_at: float = 0.0
    wall_seconds: float = 0.0

    def hash_inputs(self, paths: Sequence) -> None:
        for p in paths:
            if p is not None:
                self.inputs[str(p)] = sha256(p)

    def write(self, out_dir: Path) -> Path:
        path = Path(out_dir) / "manifest.json"
        path.parent.mkdir(parents=True, exist_ok=True)
        text = json.dumps(self.__dict__, indent=2, sort_keys=True, default=_json_default) + "\n"
        fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".manifest.", suffix=".tmp")
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
        return path


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, tuple):
        return list(o)
    raise TypeError(f"not serializable: {type(o).__name__}")


def _now() -> float:
    # SOURCE_DATE_EPOCH pins the recorded start time for reproducible manifests
    pinned = os.environ.get("SOURCE_DATE_EPOCH")
    return float(pinned) if pinned else time.time()


# Helpers

def _methods(arg: str | None, allowed: Sequence[str]) -> list[str]:
    if not arg:
        return list(allowed)
    out = [m.strip().lower() for m in arg.split(",") if m.strip()]
    bad = [m for m in out if m not in allowed]
    if bad:
        raise SchemaError(f"unknown method(s) {', '.join(bad)}; choose from {', '.join(allowed)}")
    return out


def _config(args) -> GaeConfig:
    overrides = {}
    for item in args.set or ():
        if "=" not in item:
            raise SchemaError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        overrides[k.strip()] = v.strip()
    if args.seed is not None:
        overrides["seed"] = str(args.seed)
    if args.union_bound:
        overrides["union_bound"] = "true"
    if args.threads is not None:
        overrides["threads"] = str(args.threads)
    if args.fixed_weight is not None:
        overrides["fixed_weight"] = str(args.fixed_weight)
    return load_config(args.config, overrides)


def _read(path, features=None, require_labels=False, what="") -> Dataset:
    try:
        return read_predictions(path, features, require_labels=require_labels)
    except SchemaError as exc:
        raise SchemaError(f"{what or Path(path).name}: {exc}") from None


def _run(pipeline, *args, **kwargs):
    try:
        return pipeline(*args, **kwargs)
    except (IwGaeError, ValueError, np.linalg.LinAlgError) as exc:
        if isinstance(exc, SchemaError):
            raise
        raise PipelineFailure(f"{type(exc).__name__}: {exc}") from exc


def _reliability_rows(method, conf, correct, m):
    if correct is None:
        rep = ece(conf, np.zeros_like(conf), m, method)
        return [(r[0], r[1], r[2], r[3], "") for r in rep.rows()], None
    rep = ece(conf, correct, m, method)
    return list(rep.rows()), rep.ece


# Subcommands

def cmd_calibrate(args, manifest: RunManifest) -> int:
    cfg = _config(args)
    manifest.config, manifest.seed = cfg.to_mapping(), cfg.seed
    methods = _methods(args.methods, CALIBRATION_METHODS)
    manifest.hash_inputs([args.source, args.target, args.source_features, args.target_features,
                          args.config])
    source = _read(args.source, args.source_features, require_labels=True, what="source")
    target = _read(args.target, args.target_features, what="target")
    if source.K != target.K:
        raise SchemaError(f"class counts differ: source K={source.K}, target K={target.K}")
    source, target, _ = _run(score_datasets, source, target, cfg.l2_penalty, cfg.seed)
    w = clipped_weights(source, cfg)
    results = {}
    for m in methods:
        if m == "iw-gae":
            res = _run(run_iwgae, source, target, cfg)
            log.info("iw-gae: selected temperature %s", fmt(res.t))
            results[m] = calibrate(res)
        elif m == "iw-mid":
            results[m] = calibrate(_run(run_iwmid, source, target, cfg))
        elif m == "vanilla":
            results[m] = baseline_vanilla(source, target)
        elif m == "ts":
            results[m] = _run(baseline_ts, source, target)
        elif m == "iw-ts":
            results[m] = _run(baseline_iwts, source, target, w)
        elif m == "cpcs":
            results[m] = _run(baseline_cpcs, source, target, w)
    out = Path(args.out)
    rows = [r for m in methods for r in results[m].rows()]
    write_csv(out / "confidences.csv", ["sample_id", "method", "confidence", "fallback"], rows)
    correct = target.correct if target.has_labels else None
    rel, summary = [], []
    for m in methods:
        r, e = _reliability_rows(m, results[m].confidence, correct, cfg.ece_bins)
        rel.extend(r)
        if e is not None:
            summary.append((m, e))
    write_csv(out / "reliability.csv", ["method", "bin", "count", "conf", "acc"], rel)
    manifest.outputs += ["confidences.csv", "reliability.csv"]
    if summary:
        write_csv(out / "ece.csv", ["method", "ece"], summary)
        manifest.outputs.append("ece.csv")
    return EXIT_OK


def cmd_select(args, manifest: RunManifest) -> int:
    cfg = _config(args)
    manifest.config, manifest.seed = cfg.to_mapping(), cfg.seed
    methods = _methods(args.methods, SELECTION_METHODS)
    manifest.hash_inputs([args.candidates, args.config])
    base = Path(args.candidates).parent
    entries = read_csv_dicts(args.candidates)
    if not entries:
        raise SchemaError("candidates file lists no models", 2)
    for col in ("model_id", "source", "target"):
        if col not in entries[0]:
            raise SchemaError(f"candidates file: missing column {col!r}", 1)
    ids = [e["model_id"].strip() for e in entries]
    if len(set(ids)) != len(ids):
        raise SchemaError("candidates file: duplicate model_id")

    def resolve(e, key):
        v = (e.get(key) or "").strip()
        return None if not v else base / v

    scores = {m: [] for m in methods}
    for lineno, e in enumerate(entries, start=2):
        mid = e["model_id"].strip()
        paths = [resolve(e, k) for k in ("source", "target", "source_features", "target_features")]
        try:
            manifest.hash_inputs(paths)
            src = _read(paths[0], paths[2], require_labels=True, what=f"{mid} source")
            tgt = _read(paths[1], paths[3], what=f"{mid} target")
            per = score_model(mid, tgt, src, cfg, methods)
        except (SchemaError, OSError) as exc:
            log.warning("model %s (candidates line %d) failed: %s", mid, lineno, exc)
            per = {m: math.nan for m in methods}
        for m in methods:
            scores[m].append(SelectionScore(mid, m, per[m]))
    rows = []
    ranked_any = False
    for m in methods:
        for s in rank_scores(scores[m]):
            ranked_any |= s.rank is not None
            rows.append((s.model_id, m, "" if math.isnan(s.score) else s.score,
                         "" if s.rank is None else s.rank))
    write_csv(Path(args.out) / "ranking.csv", ["model_id", "method", "score", "rank"], rows)
    manifest.outputs.append("ranking.csv")
    if not ranked_any:
        raise PipelineFailure("no model could be ranked")
    return EXIT_OK


def cmd_evaluate(args, manifest: RunManifest) -> int:
    cfg = _config(args)
    manifest.config, manifest.seed = cfg.to_mapping(), cfg.seed
    manifest.hash_inputs([args.target, args.confidences, args.config])
    target = _read(args.target, require_labels=True, what="target")
    correct = dict(zip(target.ids.tolist(), target.correct.tolist()))
    by_method: dict[str, dict[str, float]] = {}
    rows = read_csv_dicts(args.confidences)
    for lineno, r in enumerate(rows, start=2):
        try:
            sid, m, c = r["sample_id"], r["method"], float(r["confidence"])
        except (KeyError, TypeError, ValueError):
            raise SchemaError("confidences: need sample_id,method,confidence", lineno) from None
        if not 0.0 <= c <= 1.0:
            raise SchemaError(f"confidences: value {c} outside [0, 1]", lineno)
        if sid not in correct:
            raise SchemaError(f"confidences: unknown sample_id {sid!r}", lineno)
        if sid in by_method.setdefault(m, {}):
            raise SchemaError(f"confidences: duplicate row for {sid!r}, {m!r}", lineno)
        by_method[m][sid] = c
    allowed = sorted(by_method) if not args.methods else _methods(args.methods, sorted(by_method))
    out_rows, rel = [], []
    for m in allowed:
        conf = by_method[m]
        if set(conf) != set(correct):
            missing = sorted(set(correct) - set(conf))
            raise SchemaError(f"confidences for {m!r} miss {len(missing)} target ids, "
                              f"e.g. {missing[0]!r}")
        ids = target.ids.tolist()
        rep = ece([conf[i] for i in ids], [correct[i] for i in ids], cfg.ece_bins, m)
        out_rows.append((m, rep.ece, len(ids)))
        rel.extend(rep.rows())
    out = Path(args.out)
    write_csv(out / "ece.csv", ["method", "ece", "n"], out_rows)
    write_csv(out / "reliability.csv", ["method", "bin", "count", "conf", "acc"], rel)
    manifest.outputs += ["ece.csv", "reliability.csv"]
    for m, e, _ in out_rows:
        print(f"{m}\t{fmt(e)}")
    return EXIT_OK


SYNTH_FILES = ("source.csv", "target_labeled.csv", "source_features.csv", "target_features.csv",
               "truth.csv")


def cmd_diagnose(args, manifest: RunManifest) -> int:
    cfg = _config(args)
    manifest.config, manifest.seed = cfg.to_mapping(), cfg.seed
    rows, summary = [], []
    for d in map(Path, args.dirs):
        for name in SYNTH_FILES:
            if not (d / name).is_file():
                raise SchemaError(f"{d}: missing {name}")
        manifest.hash_inputs([d / n for n in SYNTH_FILES])
        source = _read(d / "source.csv", d / "source_features.csv", require_labels=True,
                       what=f"{d.name}/source.csv")
        target = _read(d / "target_labeled.csv", d / "target_features.csv", require_labels=True,
                       what=f"{d.name}/target_labeled.csv")
        truth = _read_truth(d / "truth.csv")
        try:
            cp_s = np.array([truth[i] for i in source.ids.tolist()])
            cp_t = np.array([truth[i] for i in target.ids.tolist()])
        except KeyError as exc:
            raise SchemaError(f"{d.name}/truth.csv: no row for sample_id {exc.args[0]!r}") from None
        hidden = target.replace(labels=np.full(len(target), -1))
        res = _run(run_iwgae, source, hidden, cfg)
        diag = _run(diagnostics, res, source, target, cp_s, cp_t)
        for g in diag:
            rows.append((d.name, g.group, g.eps_opt, g.ident_bias, g.src_err, g.tgt_err,
                         int(g.prop1), int(g.eq5)))
        n = len(diag)
        summary.append((d.name, res.t, n, sum(g.prop1 for g in diag) / n if n else "",
                        sum(g.eq5 for g in diag) / n if n else ""))
    out = Path(args.out)
    write_csv(out / "diagnostics.csv",
              ["dir", "group", "eps_opt", "ident_bias", "src_err", "tgt_err", "prop1", "eq5"], rows)
    if rows:
        summary.append(("ALL", "", len(rows), sum(r[6] for r in rows) / len(rows),
                        sum(r[7] for r in rows) / len(rows)))
    write_csv(out / "summary.csv", ["dir", "t", "groups", "prop1_rate", "eq5_rate"], summary)
    manifest.outputs += ["diagnostics.csv", "summary.csv"]
    return EXIT_OK


def _read_truth(path) -> dict[str, float]:
    out = {}
    for lineno, r in enumerate(read_csv_dicts(path), start=2):
        try:
            out[r["sample_id"]] = float(r["true_correct_prob"])
        except (KeyError, TypeError, ValueError):
            raise SchemaError(f"{Path(path).name}: need sample_id,true_iw,true_correct_prob",
                              lineno) from None
    return out


def cmd_synth(args, manifest: RunManifest) -> int:
    seed = 0 if args.seed is None else args.seed
    manifest.seed = seed
    manifest.config = {k: getattr(args, k) for k in
                       ("n", "d", "classes", "shift", "noise", "logit_scale", "perturb",
                        "target_logit_scale")}
    spec = make_spec(seed, d=args.d, K=args.classes, shift=args.shift, N=args.n, noise=args.noise,
                     logit_scale=args.logit_scale, perturb=args.perturb,
                     target_logit_scale=args.target_logit_scale)
    source, target, truth = generate(spec)
    out = Path(args.out)
    write_predictions(out / "source.csv", source, out / "source_features.csv")
    write_predictions(out / "target.csv", target, out / "target_features.csv")
    write_predictions(out / "target_labeled.csv", target.replace(labels=truth.target_labels))
    ids = source.ids.tolist() + target.ids.tolist()
    iw = np.concatenate([truth.true_iw(source.features), truth.true_iw(target.features)])
    cp = np.concatenate([truth.source_correct_prob, truth.target_correct_prob])
    write_csv(out / "truth.csv", ["sample_id", "true_iw", "true_correct_prob"], zip(ids, iw, cp))
    manifest.outputs += ["source.csv", "target.csv", "target_labeled.csv", "source_features.csv",
                         "target_features.csv", "truth.csv"]
    return EXIT_OK


# Parser

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key=value config file")
    common.add_argument("--seed", type=int, help="seed for every random choice")
    common.add_argument("--out", default=".", help="output directory (default: .)")
    common.add_argument("--methods", help="comma-separated subset of methods")
    common.add_argument("--union-bound", action="store_true",
                        help="split the CI level over 2B one-sided bounds")
    common.add_argument("--threads", type=int, help="worker threads for the temperature search")
    common.add_argument("--fixed-weight", type=float,
                        help="pin every binned IW to this value (e.g. 1 for no-shift checks)")
    common.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override one config entry; repeatable")

    p = argparse.ArgumentParser(prog="iwgae", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    c = sub.add_parser("calibrate", parents=[common], help="per-sample target confidences")
    c.add_argument("--source", required=True, help="labeled source validation predictions")
    c.add_argument("--target", required=True, help="target predictions")
    c.add_argument("--source-features")
    c.add_argument("--target-features")
    c.set_defaults(func=cmd_calibrate)

    s = sub.add_parser("select", parents=[common], help="rank candidate models")
    s.add_argument("candidates",
                   help="CSV: model_id,source,target[,source_features,target_features]")
    s.set_defaults(func=cmd_select)

    e = sub.add_parser("evaluate", parents=[common], help="ECE of confidences on labeled target")
    e.add_argument("--target", required=True, help="labeled target predictions")
    e.add_argument("--confidences", required=True, help="confidences.csv from calibrate")
    e.set_defaults(func=cmd_evaluate)

    d = sub.add_parser("diagnose", parents=[common], help="bound diagnostics on synthetic runs")
    d.add_argument("dirs", nargs="+", help="directories written by synth")
    d.set_defaults(func=cmd_diagnose)

    y = sub.add_parser("synth", parents=[common], help="write a synthetic covariate-shift problem")
    y.add_argument("--n", type=int, default=2000, help="samples per domain")
    y.add_argument("--d", type=int, default=2)
    y.add_argument("--classes", type=int, default=3)
    y.add_argument("--shift", type=float, default=1.0, help="distance between domain means")
    y.add_argument("--noise", type=float, default=0.1, help="label flip rate")
    y.add_argument("--logit-scale", type=float, default=2.0)
    y.add_argument("--perturb", type=float, default=0.3)
    y.add_argument("--target-logit-scale", type=float, default=1.0)
    y.set_defaults(func=cmd_synth)
    return p


def _setup_logging():
    level = os.environ.get("IWGAE_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)


def main(argv: Sequence[str] | None = None) -> int:
    _setup_logging()
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    manifest = RunManifest(command=args.command, argv=argv, config={}, seed=0, started_at=_now())
    t0 = time.perf_counter()
    try:
        code = args.func(args, manifest)
    except SchemaError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_SCHEMA
    except (FileNotFoundError, IsADirectoryError, LengthMismatch) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_SCHEMA
    except PipelineFailure as exc:
        print(f"error: pipeline failed: {exc}", file=sys.stderr)
        manifest.wall_seconds = time.perf_counter() - t0
        manifest.write(Path(args.out))
        return EXIT_PIPELINE
    manifest.wall_seconds = time.perf_counter() - t0
    manifest.write(Path(args.out))
    return code


if __name__ == "__main__":
    sys.exit(main())
