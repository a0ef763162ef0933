"""Confusion-matrix IoU metrics: mIoU over base, novel and all classes, and hIoU."""

import csv
import io as _io
import json
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError


class ConfusionMatrix:
    """Integer pixel counts, ``counts[truth, pred]``."""

    def __init__(self, n_classes):
        self.n_classes = int(n_classes)
        self.counts = np.zeros((self.n_classes, self.n_classes), dtype=np.int64)
        self.images = 0

    def copy(self):
        out = ConfusionMatrix(self.n_classes)
        out.counts = self.counts.copy()
        out.images = self.images
        return out

    def merge(self, other):
        if other.n_classes != self.n_classes:
            raise DataError("cannot merge confusion matrices of different sizes")
        out = self.copy()
        out.counts += other.counts
        out.images += other.images
        return out

    @property
    def pixels(self):
        return int(self.counts.sum())


def confusion_accumulate(pred, truth, acc):
    """Add one batch of label masks to ``acc``; returns a new matrix."""
    pred = np.asarray(pred).astype(np.int64)
    truth = np.asarray(truth).astype(np.int64)
    if pred.shape != truth.shape:
        raise DataError(f"prediction {pred.shape} and truth {truth.shape} differ")
    n = acc.n_classes
    for name, a in (("prediction", pred), ("truth", truth)):
        if a.size and (a.min() < 0 or a.max() >= n):
            raise DataError(f"{name} labels outside [0, {n})")
    out = acc.copy()
    out.counts += np.bincount(n * truth.ravel() + pred.ravel(), minlength=n * n).reshape(n, n)
    out.images += pred.shape[0] if pred.ndim == 3 else 1
    return out


def iou_per_class(acc):
    """IoU of every class seen in prediction or truth; unseen classes are left out."""
    c = acc.counts
    tp = np.diag(c)
    fp = c.sum(axis=0) - tp
    fn = c.sum(axis=1) - tp
    union = tp + fp + fn
    return {int(k): float(tp[k] / union[k]) for k in range(acc.n_classes) if union[k] > 0}


def hiou(miou_b, miou_n):
    """Harmonic mean of base and novel mIoU (0 when both are 0)."""
    if miou_b == miou_n:
        return float(miou_b)  # 2x^2 / 2x does not always round back to x
    return 2 * miou_b * miou_n / (miou_b + miou_n)


def _mean(per, ids):
    vals = [per[k] for k in ids if k in per]
    return float(np.mean(vals)) if vals else None


@dataclass
class EvalReport:
    per_class_iou: dict
    miou_base: float
    miou_novel: float
    miou_overall: float
    hiou: float
    pixels: int = 0
    images: int = 0
    tag: str = ""
    extra: dict = field(default_factory=dict)

    CSV_COLUMNS = ("tag", "miou_base", "miou_novel", "miou_overall", "hiou", "pixels", "images")

    def to_dict(self):
        return {
            "tag": self.tag,
            "per_class_iou": {str(k): v for k, v in sorted(self.per_class_iou.items())},
            "miou_base": self.miou_base,
            "miou_novel": self.miou_novel,
            "miou_overall": self.miou_overall,
            "hiou": self.hiou,
            "pixels": self.pixels,
            "images": self.images,
            **({"extra": self.extra} if self.extra else {}),
        }

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def csv_row(self, header=False):
        buf = _io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        if header:
            w.writerow(self.CSV_COLUMNS)
        d = self.to_dict()
        w.writerow(["" if d[k] is None else d[k] for k in self.CSV_COLUMNS])
        return buf.getvalue()


def evaluate(acc, base_ids, novel_ids, tag=""):
    per = iou_per_class(acc)
    mb = _mean(per, base_ids)
    mn = _mean(per, novel_ids)
    mo = _mean(per, list(base_ids) + list(novel_ids))
    h = hiou(mb, mn) if mb is not None and mn is not None else None
    return EvalReport(per, mb, mn, mo, h, acc.pixels, acc.images, tag)
