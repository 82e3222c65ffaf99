"""Multi-label classification metrics."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np
from scipy.stats import rankdata

from .config import CLASS_NAMES
from .errors import InputError


@dataclass
class MetricsReport:
    hamming_accuracy: float
    precision: list
    recall: list
    f1: list
    auc: list  # None where undefined (single-class column)
    thresholds: list
    macro_precision: float
    macro_recall: float
    macro_f1: float
    macro_auc: float | None
    prediction_rate_matrix: list  # [i][j] = P(pred_j = 1 | true_i = 1)
    n_samples: int

    def to_dict(self) -> dict:
        d = asdict(self)
        d["classes"] = list(CLASS_NAMES[: len(self.f1)])
        return d

    def to_json(self, path=None, indent: int = 2) -> str:
        text = json.dumps(self.to_dict(), indent=indent)
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text)
        return text

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        d = {k: v for k, v in d.items() if k != "classes"}
        return cls(**d)


def _safe_div(a: float, b: float) -> float:
    return a / b if b > 0 else 0.0


def binary_counts(pred: np.ndarray, true: np.ndarray) -> tuple[int, int, int, int]:
    tp = int(np.sum(pred & true))
    fp = int(np.sum(pred & ~true))
    fn = int(np.sum(~pred & true))
    tn = int(np.sum(~pred & ~true))
    return tp, fp, fn, tn


def prf(tp: int, fp: int, fn: int) -> tuple[float, float, float]:
    """Precision, recall, F1 with the 0/0 -> 0 convention."""
    p = _safe_div(tp, tp + fp)
    r = _safe_div(tp, tp + fn)
    return p, r, _safe_div(2 * tp, 2 * tp + fp + fn)


def auc_mann_whitney(scores: np.ndarray, truth: np.ndarray) -> float | None:
    """ROC AUC as the normalized rank-sum statistic; tied scores share ranks."""
    truth = np.asarray(truth, dtype=bool)
    n_pos = int(truth.sum())
    n_neg = truth.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    ranks = rankdata(scores, method="average")
    return float((ranks[truth].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def binarize(probs: np.ndarray, thresholds) -> np.ndarray:
    return np.asarray(probs) >= np.asarray(thresholds, dtype=np.float64)


def compute_metrics(probs, targets, thresholds=None) -> MetricsReport:
    probs = np.asarray(probs, dtype=np.float64)
    targets = np.asarray(targets)
    if probs.ndim != 2 or probs.shape != targets.shape:
        raise InputError(f"probs {probs.shape} and targets {targets.shape} must be matching [N, C]")
    n, c = probs.shape
    if n < 1:
        raise InputError("need at least one sample")
    thresholds = np.full(c, 0.5) if thresholds is None else np.asarray(thresholds, dtype=np.float64)
    if thresholds.shape != (c,):
        raise InputError(f"thresholds shape {thresholds.shape} != ({c},)")
    true = targets.astype(bool)
    pred = binarize(probs, thresholds)

    precision, recall, f1, auc = [], [], [], []
    for j in range(c):
        tp, fp, fn, _ = binary_counts(pred[:, j], true[:, j])
        p, r, f = prf(tp, fp, fn)
        precision.append(p)
        recall.append(r)
        f1.append(f)
        auc.append(auc_mann_whitney(probs[:, j], true[:, j]))

    rates = np.zeros((c, c))
    for i in range(c):
        rows = true[:, i]
        if rows.any():
            rates[i] = pred[rows].mean(axis=0)
    defined = [a for a in auc if a is not None]
    return MetricsReport(
        hamming_accuracy=float(1.0 - np.mean(pred != true)),
        precision=precision,
        recall=recall,
        f1=f1,
        auc=auc,
        thresholds=thresholds.tolist(),
        macro_precision=float(np.mean(precision)),
        macro_recall=float(np.mean(recall)),
        macro_f1=float(np.mean(f1)),
        macro_auc=float(np.mean(defined)) if defined else None,
        prediction_rate_matrix=rates.tolist(),
        n_samples=n,
    )


def macro_f1(probs, targets, thresholds=None) -> float:
    return compute_metrics(probs, targets, thresholds).macro_f1
