"""ROC analysis, sensitivity/specificity, patient-wise accuracy and
cross-validation aggregation."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .errors import ConfigError

log = logging.getLogger(__name__)


def _check_binary(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ConfigError(f"scores {scores.shape} and labels {labels.shape} must be equal-length 1-D")
    if not np.all(np.isfinite(scores)):
        raise ConfigError("scores must be finite")
    n_pos = int(np.sum(labels == 1))
    if n_pos == 0 or n_pos == len(labels):
        raise ConfigError("ROC rates are undefined unless both classes are present")
    return scores, labels


def roc_curve(scores, labels) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Return ``(fpr, tpr, thresholds)``.

    The first point is (0, 0) with threshold +inf; then one point per distinct
    score in descending order (tied scores form one step), ending at (1, 1).
    """
    scores, labels = _check_binary(scores, labels)
    order = np.argsort(-scores, kind="mergesort")
    s, y = scores[order], labels[order]
    last_of_group = np.r_[np.flatnonzero(np.diff(s)), len(s) - 1]
    tp = np.cumsum(y == 1)[last_of_group]
    fp = np.cumsum(y == 0)[last_of_group]
    n_pos, n_neg = tp[-1], fp[-1]
    fpr = np.r_[0.0, fp / n_neg]
    tpr = np.r_[0.0, tp / n_pos]
    thresholds = np.r_[np.inf, s[last_of_group]]
    return fpr, tpr, thresholds


def auc(fpr, tpr) -> float:
    """Trapezoidal area under an ROC polyline."""
    fpr = np.asarray(fpr, dtype=np.float64)
    tpr = np.asarray(tpr, dtype=np.float64)
    return float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) * 0.5))


def auc_score(scores, labels) -> float:
    fpr, tpr, _ = roc_curve(scores, labels)
    return auc(fpr, tpr)


def sen_spe_at(scores, labels, threshold: float) -> tuple[float, float]:
    """Sensitivity and specificity when predicting positive iff ``score >= threshold``."""
    scores, labels = _check_binary(scores, labels)
    pred = scores >= threshold
    pos = labels == 1
    return float(np.mean(pred[pos])), float(np.mean(~pred[~pos]))


def youden_threshold(scores, labels) -> float:
    """Score threshold maximizing ``TPR - FPR`` (highest such threshold on ties)."""
    fpr, tpr, thr = roc_curve(scores, labels)
    j = tpr - fpr
    best = int(np.argmax(j[1:])) + 1  # skip the +inf start point
    return float(thr[best])


def patient_accuracy(per_spectrum_probs, patient_ids: Sequence[str],
                     patient_labels: Mapping[str, int]) -> float:
    """Share of patients whose averaged class-probability vector argmaxes to their label.

    Exact ties resolve to class 0.
    """
    probs = np.asarray(per_spectrum_probs, dtype=np.float64)
    if probs.ndim == 1:
        probs = np.stack([1.0 - probs, probs], axis=1)
    pids = np.asarray(patient_ids, dtype=object)
    if len(pids) != len(probs):
        raise ConfigError("one patient id per spectrum required")
    patients = list(dict.fromkeys(pids))
    if not patients:
        raise ConfigError("no patients")
    correct = 0
    for p in patients:
        mean = probs[pids == p].mean(axis=0)
        if np.all(mean == mean[0]) and len(mean) > 1:
            log.info("patient %s: tied mean probabilities, predicting class 0", p)
        pred = int(np.argmax(mean))  # argmax returns the first maximum
        correct += pred == int(patient_labels[p])
    return correct / len(patients)


def patient_labels_from(true_classes: Sequence[int], patient_ids: Sequence[str]) -> dict[str, int]:
    """Majority class per patient (ties -> 1)."""
    out: dict[str, list[int]] = {}
    for c, p in zip(true_classes, patient_ids):
        out.setdefault(p, []).append(int(c))
    return {p: int(np.mean(v) >= 0.5) for p, v in out.items()}


@dataclass
class EvalReport:
    roc_points: list[tuple[float, float]]
    auc: float
    sensitivity: float
    specificity: float
    threshold: float
    patient_accuracy: float
    n_spectra: int
    n_patients: int
    youden_threshold: float = math.nan
    youden_sensitivity: float = math.nan
    youden_specificity: float = math.nan
    extras: dict = field(default_factory=dict)

    def metrics(self) -> dict[str, float]:
        d = {
            "auc": self.auc,
            "sensitivity": self.sensitivity,
            "specificity": self.specificity,
            "patient_accuracy": self.patient_accuracy,
            "youden_sensitivity": self.youden_sensitivity,
            "youden_specificity": self.youden_specificity,
        }
        d.update({k: v for k, v in self.extras.items() if isinstance(v, (int, float))})
        return d

    def to_dict(self) -> dict:
        d = asdict(self)
        d["roc_points"] = [list(p) for p in self.roc_points]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        d = dict(d)
        d["roc_points"] = [tuple(p) for p in d["roc_points"]]
        return cls(**d)


def evaluate(probs, labels, patient_ids, patient_labels: Mapping[str, int] | None = None,
             threshold: float = 0.5, true_labels=None) -> EvalReport:
    """Full report for per-spectrum class probabilities (column 1 = tumor)."""
    probs = np.asarray(probs, dtype=np.float64)
    scores = probs[:, 1] if probs.ndim == 2 else probs
    labels = np.asarray(labels, dtype=np.int64)
    fpr, tpr, _ = roc_curve(scores, labels)
    sen, spe = sen_spe_at(scores, labels, threshold)
    yt = youden_threshold(scores, labels)
    ysen, yspe = sen_spe_at(scores, labels, yt)
    if patient_labels is None:
        patient_labels = patient_labels_from(labels, patient_ids)
    extras = {}
    if true_labels is not None:
        true_labels = np.asarray(true_labels)
        known = true_labels >= 0
        if known.any() and len(set(true_labels[known].tolist())) == 2:
            extras["auc_true_labels"] = auc_score(scores[known], true_labels[known])
    return EvalReport(
        roc_points=list(zip(fpr.tolist(), tpr.tolist())),
        auc=auc(fpr, tpr),
        sensitivity=sen,
        specificity=spe,
        threshold=threshold,
        patient_accuracy=patient_accuracy(probs, patient_ids, patient_labels),
        n_spectra=len(labels),
        n_patients=len(set(patient_ids)),
        youden_threshold=yt,
        youden_sensitivity=ysen,
        youden_specificity=yspe,
        extras=extras,
    )


@dataclass
class CvSummary:
    """Per-run reports plus mean and sample standard deviation (ddof=1) per metric.

    A single run reports std 0.
    """

    per_fold: list[EvalReport]
    mean: dict[str, float]
    std: dict[str, float]
    labels: list[str] = field(default_factory=list)
    missing: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "per_fold": [r.to_dict() for r in self.per_fold],
            "labels": self.labels,
            "mean": self.mean,
            "std": self.std,
            "missing": self.missing,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CvSummary":
        return cls([EvalReport.from_dict(r) for r in d["per_fold"]], d["mean"], d["std"],
                   d.get("labels", []), d.get("missing", []))


def summarize_cv(reports: Sequence[EvalReport], labels: Sequence[str] | None = None,
                 missing: Sequence[str] = ()) -> CvSummary:
    if not reports:
        raise ConfigError("summarize_cv needs at least one report")
    keys = list(reports[0].metrics())
    mean, std = {}, {}
    for k in keys:
        vals = np.array([r.metrics().get(k, math.nan) for r in reports], dtype=np.float64)
        # identical runs report exactly 0 rather than rounding noise
        same = bool(np.all(vals == vals[0]))
        mean[k] = float(vals[0]) if same else float(np.mean(vals))
        std[k] = 0.0 if same or len(vals) < 2 else float(np.std(vals, ddof=1))
    return CvSummary(list(reports), mean, std, list(labels or []), list(missing))


def write_report_json(report: EvalReport | CvSummary, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(report.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_roc_csv(report: EvalReport, path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["fpr", "tpr"])
        for f, t in report.roc_points:
            w.writerow([repr(f), repr(t)])
