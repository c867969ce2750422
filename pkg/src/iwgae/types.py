"""Shared data model: prediction records, datasets, bin partitions and config."""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

DOMAINS = ("source", "target")
SPLITS = ("train", "validation", "test")


def _frozen(a):
    a = np.array(a, copy=True)
    a.flags.writeable = False
    return a


def softmax(logits, t=1.0):
    """Row-wise softmax of ``logits / t`` with max-subtraction."""
    z = np.asarray(logits, dtype=float) / t
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def max_softmax(logits, t=1.0):
    """Vectorized ``softmax_max``: (confidence, predicted class) per row.

    The predicted class is the argmax of the raw logits (lowest index on
    ties), so the temperature only rescales the confidence.
    """
    logits = np.asarray(logits, dtype=float)
    pred = np.argmax(logits, axis=-1)
    probs = softmax(logits, t)
    conf = np.take_along_axis(probs, pred[..., None], axis=-1)[..., 0]
    return conf, pred


@dataclass(frozen=True)
class PredictionRecord:
    sample_id: str
    domain: str
    split: str
    logits: tuple[float, ...]
    label: int | None = None
    features: tuple[float, ...] | None = None
    iw_score: float | None = None

    def __post_init__(self):
        if self.domain not in DOMAINS:
            raise ValueError(f"domain must be one of {DOMAINS}, got {self.domain!r}")
        if self.split not in SPLITS:
            raise ValueError(f"split must be one of {SPLITS}, got {self.split!r}")
        logits = tuple(float(v) for v in self.logits)
        if len(logits) < 2 or not all(math.isfinite(v) for v in logits):
            raise ValueError("logits must have length >= 2 and be finite")
        object.__setattr__(self, "logits", logits)
        if self.label is not None and not 0 <= self.label < len(logits):
            raise ValueError(f"label {self.label} outside [0, {len(logits)})")
        if self.features is not None:
            object.__setattr__(self, "features", tuple(float(v) for v in self.features))


def softmax_max(record: PredictionRecord, t: float = 1.0) -> tuple[float, int]:
    """Maximum temperature-scaled softmax value and the predicted class."""
    if t <= 0:
        raise ValueError("temperature must be positive")
    conf, pred = max_softmax(np.asarray(record.logits)[None, :], t)
    return float(conf[0]), int(pred[0])


@dataclass(frozen=True, eq=False)
class Dataset:
    """Column-oriented, read-only collection of prediction records.

    ``labels`` uses -1 for unlabeled rows. ``features`` and ``iw_score`` are
    optional and, when present, cover every row.
    """

    ids: np.ndarray
    domain: np.ndarray
    split: np.ndarray
    labels: np.ndarray
    logits: np.ndarray
    features: np.ndarray | None = None
    iw_score: np.ndarray | None = None

    def __post_init__(self):
        logits = np.asarray(self.logits, dtype=float)
        if logits.ndim != 2 or logits.shape[0] == 0:
            raise ValueError("dataset must be nonempty with 2-D logits")
        if logits.shape[1] < 2:
            raise ValueError("need at least two classes")
        if not np.all(np.isfinite(logits)):
            raise ValueError("logits must be finite")
        n, k = logits.shape
        labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if labels.shape[0] != n:
            raise ValueError("labels length mismatch")
        if np.any((labels < -1) | (labels >= k)):
            raise ValueError(f"labels must lie in [0, {k})")
        object.__setattr__(self, "logits", _frozen(logits))
        object.__setattr__(self, "labels", _frozen(labels))
        for name in ("ids", "domain", "split"):
            col = np.asarray(getattr(self, name), dtype=object).reshape(-1)
            if col.shape[0] != n:
                raise ValueError(f"{name} length mismatch")
            object.__setattr__(self, name, _frozen(col))
        if not set(self.domain.tolist()) <= set(DOMAINS):
            raise ValueError("unknown domain tag")
        if not set(self.split.tolist()) <= set(SPLITS):
            raise ValueError("unknown split tag")
        if self.features is not None:
            feats = np.asarray(self.features, dtype=float)
            if feats.ndim != 2 or feats.shape[0] != n:
                raise ValueError("features must be an (N, d) array")
            object.__setattr__(self, "features", _frozen(feats))
        if self.iw_score is not None:
            s = np.asarray(self.iw_score, dtype=float).reshape(-1)
            if s.shape[0] != n or not np.all(np.isfinite(s)):
                raise ValueError("iw_score must be finite and cover every row")
            object.__setattr__(self, "iw_score", _frozen(s))

    @property
    def K(self) -> int:
        return self.logits.shape[1]

    @property
    def d(self) -> int:
        return 0 if self.features is None else self.features.shape[1]

    def __len__(self):
        return self.logits.shape[0]

    @property
    def has_labels(self) -> bool:
        return bool(np.all(self.labels >= 0))

    @property
    def predictions(self) -> np.ndarray:
        return np.argmax(self.logits, axis=1)

    @property
    def correct(self) -> np.ndarray:
        """Boolean correctness of the argmax prediction; requires labels."""
        if not self.has_labels:
            from .errors import MissingLabels

            raise MissingLabels("dataset has unlabeled rows")
        return self.predictions == self.labels

    def confidences(self, t: float = 1.0) -> np.ndarray:
        return max_softmax(self.logits, t)[0]

    def replace(self, **changes) -> "Dataset":
        return dataclasses.replace(self, **changes)

    def subset(self, index) -> "Dataset":
        index = np.asarray(index)
        opt = lambda a: None if a is None else a[index]
        return Dataset(self.ids[index], self.domain[index], self.split[index],
                       self.labels[index], self.logits[index],
                       opt(self.features), opt(self.iw_score))

    @property
    def records(self) -> list[PredictionRecord]:
        out = []
        for i in range(len(self)):
            out.append(PredictionRecord(
                sample_id=str(self.ids[i]),
                domain=str(self.domain[i]),
                split=str(self.split[i]),
                logits=tuple(self.logits[i]),
                label=None if self.labels[i] < 0 else int(self.labels[i]),
                features=None if self.features is None else tuple(self.features[i]),
                iw_score=None if self.iw_score is None else float(self.iw_score[i]),
            ))
        return out

    @classmethod
    def from_records(cls, records: Sequence[PredictionRecord]) -> "Dataset":
        if not records:
            raise ValueError("dataset must be nonempty")
        ks = {len(r.logits) for r in records}
        if len(ks) != 1:
            raise ValueError("records disagree on class count")
        has_f = {r.features is not None for r in records}
        has_s = {r.iw_score is not None for r in records}
        if len(has_f) != 1 or len(has_s) != 1:
            raise ValueError("features/iw_score must be present for all records or none")
        features = None
        if records[0].features is not None:
            ds = {len(r.features) for r in records}
            if len(ds) != 1:
                raise ValueError("records disagree on feature dimension")
            features = np.array([r.features for r in records], dtype=float)
        return cls(
            ids=[r.sample_id for r in records],
            domain=[r.domain for r in records],
            split=[r.split for r in records],
            labels=[-1 if r.label is None else r.label for r in records],
            logits=np.array([r.logits for r in records], dtype=float),
            features=features,
            iw_score=None if records[0].iw_score is None else [r.iw_score for r in records],
        )


@dataclass(frozen=True, eq=False)
class BinPartition:
    """Partition of the IW-score axis into ``B`` half-open intervals.

    Bin ``j`` holds scores in ``[edges[j-1], edges[j])`` with the outer
    bins unbounded.
    """

    edges: np.ndarray

    def __post_init__(self):
        e = np.asarray(self.edges, dtype=float).reshape(-1)
        if np.any(np.diff(e) <= 0):
            raise ValueError("bin edges must be strictly increasing")
        object.__setattr__(self, "edges", _frozen(e))

    @property
    def B(self) -> int:
        return self.edges.shape[0] + 1

    def index(self, scores) -> np.ndarray:
        return np.searchsorted(self.edges, np.asarray(scores, dtype=float), side="right")

    def assign(self, ids: Iterable[str], scores) -> dict[str, int]:
        return dict(zip(map(str, ids), self.index(scores).tolist()))


DEFAULT_TEMPS = (0.85, 0.90, 0.95, 1.00, 1.05, 1.10)


@dataclass(frozen=True)
class GaeConfig:
    B: int = 10
    M: int = 10
    delta_bar: float = 0.05
    G: float = 0.001
    w_max: float = 6.0
    w_min: float = 1.0 / 6.0
    delta_tol: float = 0.1
    delta_prob: float = 0.3
    temp_grid: tuple[float, ...] = DEFAULT_TEMPS
    opt_tol: float = 1e-8
    ece_bins: int = 15
    seed: int = 0
    # artifact knobs
    union_bound: bool = False
    min_group_size: int = 5
    max_iter: int = 500
    l2_penalty: float = 1.0
    fixed_weight: float | None = None
    weighted_selection: bool = True
    threads: int = 1

    def __post_init__(self):
        object.__setattr__(self, "temp_grid", tuple(float(t) for t in self.temp_grid))
        if not 0 < self.delta_bar < 1:
            raise ValueError("delta_bar must lie in (0, 1)")
        if not 0 < self.w_min < self.w_max:
            raise ValueError("need 0 < w_min < w_max")
        if not self.temp_grid or min(self.temp_grid) <= 0:
            raise ValueError("temp_grid must be nonempty and positive")
        if self.B < 1 or self.M < 2 or self.ece_bins < 1:
            raise ValueError("B >= 1, M >= 2 and ece_bins >= 1 required")
        if self.G < 0 or self.delta_tol < 0 or self.delta_prob < 0:
            raise ValueError("G, delta_tol and delta_prob must be non-negative")
        if self.threads < 1:
            raise ValueError("threads must be >= 1")

    def per_side_delta(self, n_bins: int) -> float:
        """CI level per side and bin; ``delta_bar / 2B`` under the union bound."""
        return self.delta_bar / (2 * n_bins) if self.union_bound else self.delta_bar

    @classmethod
    def from_mapping(cls, values: Mapping[str, object]) -> "GaeConfig":
        fields_ = {f.name: f for f in dataclasses.fields(cls)}
        kwargs = {}
        for key, raw in values.items():
            key = key.strip().replace("-", "_")
            if key not in fields_:
                raise KeyError(f"unknown config key {key!r}")
            kwargs[key] = _coerce(fields_[key], raw)
        return cls(**kwargs)

    def to_mapping(self) -> dict[str, object]:
        return dataclasses.asdict(self)


def _coerce(f: dataclasses.Field, raw):
    if not isinstance(raw, str):
        return raw
    raw = raw.strip()
    name = f.name
    if name == "temp_grid":
        return tuple(float(v) for v in raw.replace(";", ",").split(",") if v.strip())
    if name == "fixed_weight":
        return None if raw.lower() in ("", "none") else float(raw)
    if name in ("union_bound", "weighted_selection"):
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"{name}: expected a boolean, got {raw!r}")
    if name in ("B", "M", "ece_bins", "seed", "min_group_size", "max_iter", "threads"):
        return int(raw)
    if name in ("w_min", "w_max"):
        # allow fractions like 1/6
        if "/" in raw:
            num, den = raw.split("/", 1)
            return float(num) / float(den)
    return float(raw)
