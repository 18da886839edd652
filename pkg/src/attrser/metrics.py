"""Recognition metrics (WAR, UAR, confusion) and detection metrics (AUROC, FPR95).

Detection convention: ID samples are positives and a higher score means
"more in-distribution".
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np
from scipy.stats import rankdata


@dataclass
class EvalReport:
    war: float
    uar: float
    confusion: np.ndarray
    per_class_recall: np.ndarray
    class_names: list = field(default_factory=list)

    def as_row(self) -> dict:
        row = {"war": self.war, "uar": self.uar}
        for i, r in enumerate(self.per_class_recall):
            name = self.class_names[i] if i < len(self.class_names) else str(i)
            row[f"recall_{name}"] = float(r)
        return row


@dataclass
class ReliabilityReport:
    detector: str
    fpr95: float
    auroc: float


def _pair(preds, labels):
    preds = np.asarray(preds, dtype=np.int64).reshape(-1)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if preds.shape != labels.shape:
        raise ValueError(f"length mismatch: {preds.size} predictions vs {labels.size} labels")
    return preds, labels


def war(preds, labels) -> float:
    preds, labels = _pair(preds, labels)
    if labels.size == 0:
        raise ValueError("war of an empty set is undefined")
    return float(np.mean(preds == labels))


def confusion_matrix(preds, labels, num_classes: int) -> np.ndarray:
    """counts[true, pred]."""
    preds, labels = _pair(preds, labels)
    for arr, what in ((preds, "prediction"), (labels, "label")):
        if arr.size and (arr.min() < 0 or arr.max() >= num_classes):
            raise ValueError(f"{what} outside [0, {num_classes})")
    counts = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(counts, (labels, preds), 1)
    return counts


def per_class_recall(confusion: np.ndarray) -> np.ndarray:
    """Diagonal over row sums; NaN for classes with no samples."""
    support = confusion.sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(support > 0, np.diag(confusion) / np.maximum(support, 1), np.nan)


def uar(preds, labels, num_classes: int | None = None) -> float:
    """Mean per-class recall over classes that appear in ``labels``."""
    preds, labels = _pair(preds, labels)
    if labels.size == 0:
        raise ValueError("uar of an empty set is undefined")
    k = num_classes or int(max(preds.max(), labels.max())) + 1
    recall = per_class_recall(confusion_matrix(preds, labels, k))
    return float(np.nanmean(recall))


def eval_report(preds, labels, num_classes: int, class_names=None) -> EvalReport:
    cm = confusion_matrix(preds, labels, num_classes)
    return EvalReport(
        war=war(preds, labels),
        uar=uar(preds, labels, num_classes),
        confusion=cm,
        per_class_recall=per_class_recall(cm),
        class_names=list(class_names or []),
    )


def _scores(id_scores, ood_scores):
    id_scores = np.asarray(id_scores, dtype=np.float64).reshape(-1)
    ood_scores = np.asarray(ood_scores, dtype=np.float64).reshape(-1)
    if id_scores.size == 0 or ood_scores.size == 0:
        raise ValueError("both ID and OOD score sets must be non-empty")
    return id_scores, ood_scores


def auroc(id_scores, ood_scores) -> float:
    """P(random ID score > random OOD score), ties counted one half.

    Rank-sum (Mann-Whitney) form with mid-ranks for ties.
    """
    id_scores, ood_scores = _scores(id_scores, ood_scores)
    n, m = id_scores.size, ood_scores.size
    ranks = rankdata(np.concatenate([id_scores, ood_scores]), method="average")
    u = ranks[:n].sum() - n * (n + 1) / 2.0
    return float(u / (n * m))


def tpr_quota(n: int, tpr: float = 0.95) -> int:
    """Smallest count of ID samples reaching ``tpr``: ceil(tpr * n), computed exactly."""
    q = Fraction(str(tpr))
    return -((-q.numerator * n) // q.denominator)


def fpr_at_tpr(id_scores, ood_scores, tpr: float = 0.95) -> float:
    """OOD acceptance rate at the largest threshold that keeps ``tpr`` of ID (>= rule)."""
    id_scores, ood_scores = _scores(id_scores, ood_scores)
    k = tpr_quota(id_scores.size, tpr)
    threshold = np.sort(id_scores)[::-1][k - 1]
    return float(np.mean(ood_scores >= threshold))


def fpr95(id_scores, ood_scores) -> float:
    return fpr_at_tpr(id_scores, ood_scores, 0.95)


def reliability(detector: str, id_scores, ood_scores) -> ReliabilityReport:
    return ReliabilityReport(detector, fpr95(id_scores, ood_scores), auroc(id_scores, ood_scores))
