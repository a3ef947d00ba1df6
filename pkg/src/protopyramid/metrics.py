"""Evaluation metrics: one-vs-rest AUROC, confusion matrix, report."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .prototypes import CLASS_NAMES, NUM_CLASSES

LESION_CLASSES = (0, 1, 2)


def _average_ranks(x: np.ndarray) -> np.ndarray:
    """1-based ranks with ties assigned the average rank."""
    order = np.argsort(x, kind="stable")
    ranks = np.empty(len(x))
    sx = x[order]
    i = 0
    while i < len(sx):
        j = i
        while j + 1 < len(sx) and sx[j + 1] == sx[i]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def auroc_ovr(scores, labels, cls: int) -> float:
    """Rank-based (Mann-Whitney) one-vs-rest AUROC with tie correction."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels)
    pos = labels == cls
    n_pos = int(pos.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError(f"auroc: class {cls} needs both positives and negatives")
    ranks = _average_ranks(scores)
    return float((ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def confusion_matrix(preds, labels, n_classes: int = NUM_CLASSES) -> np.ndarray:
    """Rows = true class, columns = predicted class."""
    preds = np.asarray(preds)
    labels = np.asarray(labels)
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (labels, preds), 1)
    return cm


@dataclass
class EvalReport:
    per_class_auroc: dict
    macro_auroc_lesion: float
    macro_auroc_all: float
    confusion: np.ndarray
    sensitivity: dict
    specificity: dict
    n_samples: int

    def to_dict(self) -> dict:
        return {
            "n_samples": self.n_samples,
            "per_class_auroc": self.per_class_auroc,
            "macro_auroc_lesion": self.macro_auroc_lesion,
            "macro_auroc_all": self.macro_auroc_all,
            "confusion": self.confusion.tolist(),
            "sensitivity": self.sensitivity,
            "specificity": self.specificity,
        }


def class_scores(model, images: np.ndarray, batch_size: int = 64) -> np.ndarray:
    """Softmax class probabilities, batched, no autodiff tape."""
    chunks = []
    with ad.no_grad():
        for start in range(0, len(images), batch_size):
            logits = model.forward(images[start : start + batch_size]).logits
            chunks.append(ad.softmax(logits, axis=1).data)
    return np.concatenate(chunks, axis=0)


def evaluate(model, images, labels, batch_size: int = 64) -> EvalReport:
    labels = np.asarray(labels)
    probs = class_scores(model, images, batch_size)
    preds = probs.argmax(axis=1)
    cm = confusion_matrix(preds, labels)
    per_class = {}
    for cls in range(NUM_CLASSES):
        if (labels == cls).any() and (labels != cls).any():
            per_class[CLASS_NAMES[cls]] = auroc_ovr(probs[:, cls], labels, cls)
    lesion_aucs = [per_class[CLASS_NAMES[c]] for c in LESION_CLASSES
                   if CLASS_NAMES[c] in per_class]
    sensitivity = {}
    specificity = {}
    for cls in range(NUM_CLASSES):
        tp = cm[cls, cls]
        fn = cm[cls].sum() - tp
        fp = cm[:, cls].sum() - tp
        tn = cm.sum() - tp - fn - fp
        if tp + fn:
            sensitivity[CLASS_NAMES[cls]] = float(tp / (tp + fn))
        if tn + fp:
            specificity[CLASS_NAMES[cls]] = float(tn / (tn + fp))
    return EvalReport(
        per_class_auroc=per_class,
        macro_auroc_lesion=float(np.mean(lesion_aucs)) if lesion_aucs else float("nan"),
        macro_auroc_all=float(np.mean(list(per_class.values()))) if per_class else float("nan"),
        confusion=cm,
        sensitivity=sensitivity,
        specificity=specificity,
        n_samples=len(labels),
    )
