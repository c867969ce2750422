"""CSV ingestion and emission for prediction dumps, features and configs."""

from __future__ import annotations

import csv
import math
import os
import re
import tempfile
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import SchemaError
from .types import DOMAINS, SPLITS, Dataset, GaeConfig

_LOGIT = re.compile(r"logit_(\d+)$")
_FEAT = re.compile(r"f_(\d+)$")


def fmt(x) -> str:
    """Shortest round-tripping text for a float; ints and strings pass through."""
    if isinstance(x, (bool, np.bool_)):
        return "1" if x else "0"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


def _float(text, line, what):
    try:
        v = float(text)
    except ValueError:
        raise SchemaError(f"{what}: not a number: {text!r}", line) from None
    if not math.isfinite(v):
        raise SchemaError(f"{what}: non-finite value {text!r}", line)
    return v


def read_predictions(path, features_path=None, require_labels=False) -> Dataset:
    """Read a prediction CSV (and optional feature CSV) into a Dataset."""
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise SchemaError("empty file", 1) from None
        for col in ("sample_id", "domain", "split", "label"):
            if col not in header:
                raise SchemaError(f"missing column {col!r}", 1)
        logit_cols = sorted((int(m.group(1)), i) for i, h in enumerate(header)
                            if (m := _LOGIT.match(h)))
        if [k for k, _ in logit_cols] != list(range(len(logit_cols))) or len(logit_cols) < 2:
            raise SchemaError("logit columns must be logit_0..logit_{K-1} with K >= 2", 1)
        logit_idx = [i for _, i in logit_cols]
        pos = {h: i for i, h in enumerate(header)}
        has_score = "iw_score" in pos
        ids, doms, splits, labels, logits, scores = [], [], [], [], [], []
        seen = set()
        K = len(logit_idx)
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise SchemaError(f"expected {len(header)} fields, got {len(row)}", lineno)
            sid = row[pos["sample_id"]].strip()
            if not sid:
                raise SchemaError("empty sample_id", lineno)
            if sid in seen:
                raise SchemaError(f"duplicate sample_id {sid!r}", lineno)
            seen.add(sid)
            dom = row[pos["domain"]].strip()
            if dom not in DOMAINS:
                raise SchemaError(f"domain must be one of {DOMAINS}, got {dom!r}", lineno)
            split = row[pos["split"]].strip()
            if split not in SPLITS:
                raise SchemaError(f"split must be one of {SPLITS}, got {split!r}", lineno)
            lab = row[pos["label"]].strip()
            if lab == "":
                if require_labels:
                    raise SchemaError("missing label", lineno)
                label = -1
            else:
                try:
                    label = int(lab)
                except ValueError:
                    raise SchemaError(f"label not an integer: {lab!r}", lineno) from None
                if not 0 <= label < K:
                    raise SchemaError(f"label {label} outside [0, {K})", lineno)
            ids.append(sid)
            doms.append(dom)
            splits.append(split)
            labels.append(label)
            logits.append([_float(row[i], lineno, header[i]) for i in logit_idx])
            if has_score:
                s = _float(row[pos["iw_score"]], lineno, "iw_score")
                if s <= 0:
                    raise SchemaError("iw_score must be positive", lineno)
                scores.append(s)
    if not ids:
        raise SchemaError("no data rows", 2)
    features = None
    if features_path is not None:
        features = _read_features(Path(features_path), ids)
    return Dataset(ids=ids, domain=doms, split=splits, labels=labels,
                   logits=np.array(logits, dtype=float), features=features,
                   iw_score=np.array(scores) if has_score else None)


def _read_features(path: Path, ids: Sequence[str]) -> np.ndarray:
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise SchemaError(f"{path.name}: empty file", 1) from None
        if not header or header[0] != "sample_id":
            raise SchemaError(f"{path.name}: first column must be sample_id", 1)
        fcols = [int(m.group(1)) for h in header[1:] if (m := _FEAT.match(h))]
        if fcols != list(range(len(header) - 1)) or not fcols:
            raise SchemaError(f"{path.name}: feature columns must be f_0..f_(d-1)", 1)
        rows = {}
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise SchemaError(f"{path.name}: expected {len(header)} fields", lineno)
            rows[row[0].strip()] = [_float(v, lineno, path.name) for v in row[1:]]
    missing = [i for i in ids if i not in rows]
    if missing:
        raise SchemaError(f"{path.name}: no features for sample_id {missing[0]!r}")
    return np.array([rows[i] for i in ids], dtype=float)


def write_predictions(path, data: Dataset, features_path=None) -> None:
    header = ["sample_id", "domain", "split", "label"] + [f"logit_{k}" for k in range(data.K)]
    if data.iw_score is not None:
        header.append("iw_score")
    rows = []
    for i in range(len(data)):
        row = [data.ids[i], data.domain[i], data.split[i],
               "" if data.labels[i] < 0 else int(data.labels[i])]
        row += list(data.logits[i])
        if data.iw_score is not None:
            row.append(data.iw_score[i])
        rows.append(row)
    write_csv(path, header, rows)
    if features_path is not None and data.features is not None:
        fh = ["sample_id"] + [f"f_{j}" for j in range(data.d)]
        write_csv(features_path, fh, ([data.ids[i], *data.features[i]] for i in range(len(data))))


def write_csv(path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    """Write a CSV atomically (temp file + rename) with round-trip float text."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for row in rows:
                w.writerow([fmt(v) for v in row])
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_csv_dicts(path) -> list[dict[str, str]]:
    with Path(path).open(newline="") as fh:
        return list(csv.DictReader(fh))


def read_config(path) -> dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    values = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise SchemaError(f"config: expected key=value, got {raw!r}", lineno)
        key, value = line.split("=", 1)
        values[key.strip()] = value.strip()
    return values


def load_config(path=None, overrides=None) -> GaeConfig:
    values = read_config(path) if path is not None else {}
    values.update({k: v for k, v in (overrides or {}).items() if v is not None})
    try:
        return GaeConfig.from_mapping(values)
    except (KeyError, ValueError) as exc:
        raise SchemaError(f"config: {exc}") from None
