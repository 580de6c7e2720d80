"""Pixel-level segmentation metrics: class accuracy, overall accuracy, mean IoU.

Counts are pooled across samples before any division. Per-class accuracy of a
class with no ground-truth pixels is ``None`` (absent), never 0.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np


def confusion(pred, gt, num_classes):
    """(C, C) matrix, rows ground truth, columns prediction."""
    pred = np.asarray(pred, dtype=np.int64).ravel()
    gt = np.asarray(gt, dtype=np.int64).ravel()
    if pred.shape != gt.shape:
        raise ValueError(f"prediction size {pred.size} != ground-truth size {gt.size}")
    return np.bincount(gt * num_classes + pred, minlength=num_classes * num_classes).reshape(
        num_classes, num_classes)


def class_accuracy(pred, gt, i):
    gt = np.asarray(gt)
    n_gt = int((gt == i).sum())
    if n_gt == 0:
        return None
    return int(((gt == i) & (np.asarray(pred) == i)).sum()) / n_gt


def overall_accuracy(pred, gt):
    gt = np.asarray(gt)
    return int((np.asarray(pred) == gt).sum()) / gt.size


def mean_iou(pred, gt, num_classes):
    cm = confusion(pred, gt, num_classes)
    return _miou(cm)


def _miou(cm):
    inter = np.diag(cm)
    union = cm.sum(axis=0) + cm.sum(axis=1) - inter
    present = union > 0
    if not present.any():
        return None
    return float(np.mean(inter[present] / union[present]))


@dataclass
class HeadMetrics:
    class_names: tuple
    cm: np.ndarray = None

    def __post_init__(self):
        if self.cm is None:
            c = len(self.class_names)
            self.cm = np.zeros((c, c), np.int64)

    def add(self, pred, gt):
        self.cm += confusion(pred, gt, len(self.class_names))
        return self

    @property
    def correct(self):
        return np.diag(self.cm).copy()

    @property
    def gt_count(self):
        return self.cm.sum(axis=1)

    def class_accuracy(self, i):
        n = int(self.gt_count[i])
        return None if n == 0 else int(self.cm[i, i]) / n

    @property
    def overall_accuracy(self):
        return int(np.trace(self.cm)) / int(self.cm.sum())

    @property
    def mean_iou(self):
        return _miou(self.cm)

    def report(self):
        names = self.class_names
        return {
            "overall_accuracy": self.overall_accuracy,
            "mean_iou": self.mean_iou,
            # background is left out of per-class accuracy but kept in overall
            "class_accuracy": {names[i]: self.class_accuracy(i) for i in range(1, len(names))},
            "correct": {n: int(v) for n, v in zip(names, self.correct)},
            "ground_truth": {n: int(v) for n, v in zip(names, self.gt_count)},
        }


@dataclass
class Metrics:
    boundary: HeadMetrics
    room: HeadMetrics
    notes: dict = field(default_factory=lambda: {
        "background_in_overall_accuracy": True,
        "background_in_class_accuracy": False,
        "mean_iou_over": "classes present in ground truth or prediction, background included",
    })

    def report(self):
        b, r = self.boundary.report(), self.room.report()
        merged_acc = dict(b["class_accuracy"])
        merged_acc.update(r["class_accuracy"])
        pooled = (int(np.trace(self.boundary.cm)) + int(np.trace(self.room.cm))) / (
            int(self.boundary.cm.sum()) + int(self.room.cm.sum()))
        return {
            "boundary": b,
            "room": r,
            "merged": {"class_accuracy": merged_acc, "overall_accuracy": pooled},
            "notes": self.notes,
        }

    def to_json(self):
        return json.dumps(self.report(), indent=2) + "\n"
