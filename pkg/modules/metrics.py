"""
modules/metrics.py · Confusion matrices and IoU scores for ConDA Desk

Rows are ground truth, columns prediction. Elements whose truth is IGNORE
are skipped. IoU of a class present in neither truth nor prediction is NaN
and left out of the mean; a class present in truth but never predicted
scores 0.
"""

import logging
from dataclasses import dataclass

import numpy as np
import pandas as pd

from modules.pointcloud import IGNORE
from utils.errors import DataError, ShapeError

logger = logging.getLogger(__name__)


@dataclass
class ConfusionMatrix:
    num_classes: int
    counts: np.ndarray = None
    total: int = 0

    def __post_init__(self):
        if self.counts is None:
            self.counts = np.zeros((self.num_classes, self.num_classes), dtype=np.int64)

    def copy(self) -> "ConfusionMatrix":
        return ConfusionMatrix(self.num_classes, self.counts.copy(), self.total)


def accumulate(cm: ConfusionMatrix, truth, pred) -> ConfusionMatrix:
    """Add (truth, pred) pairs; IGNORE truth is skipped. Returns cm, updated in place."""
    truth = np.asarray(truth, dtype=np.int64).reshape(-1)
    pred = np.asarray(pred, dtype=np.int64).reshape(-1)
    if truth.shape != pred.shape:
        raise ShapeError(f"truth has {truth.size} elements, prediction {pred.size}")
    keep = truth != IGNORE
    truth, pred = truth[keep], pred[keep]
    c = cm.num_classes
    if truth.size and (truth.min() < 0 or truth.max() >= c or pred.min() < 0 or pred.max() >= c):
        raise DataError(f"class id outside [0, {c})")
    cm.counts += np.bincount(truth * c + pred, minlength=c * c).reshape(c, c)
    cm.total += int(truth.size)
    return cm


def merge(a: ConfusionMatrix, b: ConfusionMatrix) -> ConfusionMatrix:
    if a.num_classes != b.num_classes:
        raise ShapeError(f"cannot merge {a.num_classes}-class and {b.num_classes}-class matrices")
    return ConfusionMatrix(a.num_classes, a.counts + b.counts, a.total + b.total)


def scores(cm: ConfusionMatrix) -> dict:
    """Per-class IoU, mIoU over present classes, FIoU weighted by truth frequency."""
    if cm.counts.sum() == 0:
        raise DataError("confusion matrix is empty")
    counts = cm.counts.astype(np.float64)
    tp = np.diag(counts)
    truth = counts.sum(axis=1)
    pred = counts.sum(axis=0)
    union = truth + pred - tp
    with np.errstate(divide="ignore", invalid="ignore"):
        iou = np.where(union > 0, tp / union, np.nan)
    freq = truth / truth.sum()
    return {
        "iou": iou,
        "miou": float(np.nanmean(iou)),
        "fiou": float(np.sum(freq * np.nan_to_num(iou))),
    }


def metrics_row(cm: ConfusionMatrix, class_names=None, **fields) -> dict:
    """One CSV-log row: the given fields plus miou, fiou and one iou_<class> column per class."""
    s = scores(cm)
    names = class_names or [str(c) for c in range(cm.num_classes)]
    row = dict(fields)
    row["miou"] = s["miou"]
    row["fiou"] = s["fiou"]
    for name, v in zip(names, s["iou"]):
        row[f"iou_{name}"] = float(v)
    return row


def to_frame(cm: ConfusionMatrix, class_names=None) -> pd.DataFrame:
    """Per-class table: truth/prediction counts and IoU."""
    s = scores(cm)
    names = class_names or [str(c) for c in range(cm.num_classes)]
    tp = np.diag(cm.counts)
    return pd.DataFrame({
        "class": names,
        "truth": cm.counts.sum(axis=1),
        "predicted": cm.counts.sum(axis=0),
        "tp": tp,
        "iou": s["iou"],
    })
