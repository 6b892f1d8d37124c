"""Evaluation: confusion matrix, accuracy, precision/recall/F1, class maps.

Conventions: rows of the confusion matrix are ground truth, columns are
predictions, and only cells valid in both grids are counted. A class with
no ground-truth support and no predictions is reported as absent (the
"--" convention); zero-division F1 is 0. Weighted F1 weights per-class F1
by ground-truth support.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .datagrid import INVALID_LABEL, LabelGrid

# Fig.-style class map palette: class id -> RGB; invalid cells are white.
PALETTE = (
    (0xD7, 0x30, 0x27),
    (0xFC, 0x8D, 0x59),
    (0xFE, 0xE0, 0x8B),
    (0x91, 0xBF, 0xDB),
    (0x45, 0x75, 0xB4),
)
INVALID_COLOR = (0xFF, 0xFF, 0xFF)


@dataclass
class ConfusionMatrix:
    counts: np.ndarray                 # [K,K] int64, rows = truth, cols = pred

    @property
    def num_classes(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.counts + other.counts)


def confusion(pred: LabelGrid, truth: LabelGrid) -> ConfusionMatrix:
    """Count (truth, prediction) pairs over cells valid in both grids."""
    if pred.labels.shape != truth.labels.shape:
        raise ValueError(f"extent mismatch: pred {pred.labels.shape} vs "
                         f"truth {truth.labels.shape}")
    k = max(pred.num_classes, truth.num_classes)
    return confusion_from_arrays(pred.labels, truth.labels, k)


def confusion_from_arrays(pred: np.ndarray, truth: np.ndarray, num_classes: int) -> ConfusionMatrix:
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    valid = (pred != INVALID_LABEL) & (truth != INVALID_LABEL)
    if not valid.any():
        raise ValueError("no valid cells")
    t = truth[valid].astype(np.int64)
    p = pred[valid].astype(np.int64)
    counts = np.bincount(t * num_classes + p,
                         minlength=num_classes * num_classes)
    return ConfusionMatrix(counts.reshape(num_classes, num_classes))


@dataclass
class ClassScore:
    precision: float
    recall: float
    f1: float
    support: int
    absent: bool                       # neither true nor predicted


@dataclass
class Scores:
    per_class: list
    accuracy: float
    macro_precision: float
    macro_recall: float
    macro_f1: float
    weighted_f1: float


def scores(cm: ConfusionMatrix) -> Scores:
    """Derive accuracy, per-class and macro P/R/F1, and weighted F1.

    Macro averages run over classes present in the matrix (true or
    predicted at least once); fully absent classes are excluded from the
    averages and flagged absent.
    """
    c = cm.counts
    if c.sum() == 0:
        raise ValueError("empty confusion matrix")
    support = c.sum(axis=1)
    predicted = c.sum(axis=0)
    diag = np.diag(c)
    per_class = []
    for k in range(cm.num_classes):
        sup, prd = int(support[k]), int(predicted[k])
        absent = sup == 0 and prd == 0
        precision = diag[k] / prd if prd else 0.0
        recall = diag[k] / sup if sup else 0.0
        f1 = (2 * precision * recall / (precision + recall)
              if precision + recall else 0.0)
        per_class.append(ClassScore(float(precision), float(recall), float(f1),
                                    sup, absent))
    present = [s for s in per_class if not s.absent]
    supported = [s for s in per_class if s.support > 0]
    total_support = sum(s.support for s in supported)
    return Scores(
        per_class=per_class,
        accuracy=float(diag.sum() / c.sum()),
        macro_precision=float(np.mean([s.precision for s in present])),
        macro_recall=float(np.mean([s.recall for s in present])),
        macro_f1=float(np.mean([s.f1 for s in present])),
        weighted_f1=float(sum(s.f1 * s.support for s in supported) / total_support),
    )


def scores_csv(sc: Scores) -> str:
    """Per-class rows plus macro/weighted/accuracy summary rows."""
    lines = ["class,precision,recall,f1,support"]
    for k, s in enumerate(sc.per_class):
        if s.absent:
            lines.append(f"{k},--,--,--,0")
        else:
            lines.append(f"{k},{s.precision:.6f},{s.recall:.6f},{s.f1:.6f},{s.support}")
    total = sum(s.support for s in sc.per_class)
    lines.append(f"macro,{sc.macro_precision:.6f},{sc.macro_recall:.6f},"
                 f"{sc.macro_f1:.6f},{total}")
    lines.append(f"weighted,,,{sc.weighted_f1:.6f},{total}")
    lines.append(f"accuracy,,,{sc.accuracy:.6f},{total}")
    return "\n".join(lines) + "\n"


def render_classmap(labels: LabelGrid, palette=PALETTE) -> bytes:
    """Binary PPM (P6) image of a label grid under the fixed palette."""
    lab = labels.labels
    k = len(palette)
    bad = (lab != INVALID_LABEL) & (lab >= k)
    if bad.any():
        raise ValueError(f"label {int(lab[bad].max())} has no palette entry")
    lut = np.zeros((256, 3), dtype=np.uint8)
    for i, color in enumerate(palette):
        lut[i] = color
    lut[INVALID_LABEL] = INVALID_COLOR
    pixels = lut[lab]
    header = f"P6\n{labels.width} {labels.height}\n255\n".encode("ascii")
    return header + pixels.tobytes()
