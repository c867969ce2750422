"""Importance-weighted group accuracy estimation under covariate shift.

Source validation predictions are grouped by confidence, and each group's
target accuracy is estimated with binned importance weights chosen inside
their confidence intervals so that two source-accuracy estimators agree.
The estimates serve as calibrated target confidences and as model-selection
scores.
"""

__version__ = "0.1.0"

from .ci import BinomialCI, IwIntervals, clopper_pearson, iw_interval, iw_intervals
from .domain import DomainClassifier, build_bins, fit_domain_classifier, iw_score, score_datasets
from .errors import IwGaeError, SchemaError
from .estimators import (
    CalibrationReport, Confidences, SelectionScore, calibrate, diagnostics, ece, select,
    selection_score,
)
from .grouping import GroupSpec, assign_groups
from .io import load_config, read_predictions, write_predictions
from .optimizer import GroupSolution, solve_all_groups, solve_group
from .pipeline import GaeResult, GroupAccuracyEstimate, run_iwgae, run_iwmid
from .types import BinPartition, Dataset, GaeConfig, PredictionRecord

__all__ = [
    "BinPartition", "BinomialCI", "CalibrationReport", "Confidences", "Dataset", "DomainClassifier",
    "GaeConfig", "GaeResult", "GroupAccuracyEstimate", "GroupSolution", "GroupSpec", "IwGaeError",
    "IwIntervals", "PredictionRecord", "SchemaError", "SelectionScore", "assign_groups",
    "build_bins", "calibrate", "clopper_pearson", "diagnostics", "ece", "fit_domain_classifier",
    "iw_interval", "iw_intervals", "iw_score", "load_config", "read_predictions", "run_iwgae",
    "run_iwmid", "score_datasets", "select", "selection_score", "solve_all_groups", "solve_group",
    "write_predictions", "__version__",
]
