"""Classification metrics: accuracy, macro recall, macro F1.

Macro averaging: per-class scores averaged with equal class weight. Classes
with an empty denominator (no true samples / no predictions) score 0.
"""

from __future__ import annotations

import numpy as np


def confusion_matrix(labels: np.ndarray, preds: np.ndarray,
                     num_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    preds = np.asarray(preds, dtype=np.int64)
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (labels, preds), 1)
    return cm


def classification_metrics(labels: np.ndarray, preds: np.ndarray,
                           num_classes: int) -> dict:
    """Accuracy, macro recall, macro F1, and per-class precision/recall/F1."""
    cm = confusion_matrix(labels, preds, num_classes)
    tp = np.diag(cm).astype(np.float64)
    support = cm.sum(axis=1).astype(np.float64)       # true samples per class
    predicted = cm.sum(axis=0).astype(np.float64)     # predictions per class

    with np.errstate(invalid="ignore", divide="ignore"):
        recall = np.where(support > 0, tp / support, 0.0)
        precision = np.where(predicted > 0, tp / predicted, 0.0)
        denom = precision + recall
        f1 = np.where(denom > 0, 2.0 * precision * recall / denom, 0.0)

    return {
        "accuracy": float(tp.sum() / cm.sum()),
        "macro_recall": float(recall.mean()),
        "macro_f1": float(f1.mean()),
        "per_class": [{
            "label": c,
            "support": int(support[c]),
            "precision": float(precision[c]),
            "recall": float(recall[c]),
            "f1": float(f1[c]),
        } for c in range(num_classes)],
    }
