"""Evaluation: classification metrics, detection quality, correction accuracy."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidInputError


def confusion_matrix(truths, predictions, n_classes: int) -> np.ndarray:
    """Count matrix with rows = true class, columns = predicted class."""
    t = np.asarray(truths, dtype=np.int64)
    p = np.asarray(predictions, dtype=np.int64)
    if t.shape != p.shape:
        raise InvalidInputError("truths and predictions disagree in length")
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (t, p), 1)
    return cm


@dataclass(frozen=True)
class ClassificationMetrics:
    macro_precision: float
    macro_recall: float
    macro_f1: float
    accuracy: float


def classification_metrics(cm: np.ndarray) -> ClassificationMetrics:
    """Macro-averaged precision/recall/F1 and accuracy; 0/0 counts as 0."""
    cm = np.asarray(cm, dtype=np.float64)
    total = cm.sum()
    if total <= 0:
        raise InvalidInputError("empty confusion matrix")
    diag = np.diag(cm)
    col = cm.sum(axis=0)
    row = cm.sum(axis=1)
    precision = np.divide(diag, col, out=np.zeros_like(diag), where=col > 0)
    recall = np.divide(diag, row, out=np.zeros_like(diag), where=row > 0)
    pr = precision + recall
    f1 = np.divide(2 * precision * recall, pr, out=np.zeros_like(diag), where=pr > 0)
    return ClassificationMetrics(
        macro_precision=float(precision.mean()),
        macro_recall=float(recall.mean()),
        macro_f1=float(f1.mean()),
        accuracy=float(diag.sum() / total),
    )


@dataclass(frozen=True)
class DetectionMetrics:
    precision: float
    recall: float
    noisy_group_mean_rate: float  # nan when the noisy group is empty
    clean_group_mean_rate: float


def detection_metrics(assignment, plan, threshold: float) -> DetectionMetrics:
    """Quality of the noisy tag against planned rates.

    A client counts as truly noisy when its planned rate is >= threshold.
    Also reports the mean planned rate inside each assigned group.
    """
    planned = {e.client_id: e.rate for e in plan.entries}
    for cid in range(assignment.n_clients):
        if cid not in planned:
            raise InvalidInputError(f"client {cid} missing from the noise plan")
    tagged_noisy = set(assignment.noisy_ids())
    truly_noisy = {cid for cid, r in planned.items() if r >= threshold}
    tp = len(tagged_noisy & truly_noisy)
    precision = tp / len(tagged_noisy) if tagged_noisy else 0.0
    recall = tp / len(truly_noisy) if truly_noisy else 0.0

    def group_mean(ids):
        return float(np.mean([planned[i] for i in ids])) if ids else float("nan")

    return DetectionMetrics(
        precision=float(precision),
        recall=float(recall),
        noisy_group_mean_rate=group_mean(sorted(tagged_noisy)),
        clean_group_mean_rate=group_mean(assignment.clean_ids()),
    )


def correction_accuracy(estimates, true_labels) -> float:
    """Fraction of samples whose estimated label argmax hits the true label.

    `estimates` is (n, M) soft labels (or any scores); argmax ties resolve to
    the lowest class index.
    """
    est = np.asarray(estimates, dtype=np.float64)
    truth = np.asarray(true_labels, dtype=np.int64)
    if est.ndim != 2 or est.shape[0] != truth.shape[0]:
        raise InvalidInputError("estimates and true labels disagree in length")
    return float(np.mean(est.argmax(axis=1) == truth))
