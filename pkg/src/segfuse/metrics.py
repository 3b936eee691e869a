"""Streaming confusion-matrix accumulation and per-class IoU / mIoU.

Counts are exact 64-bit integers (row = ground truth, column = prediction);
pixels whose ground truth is the ignore id contribute nothing.  Matrices
merge by entrywise addition, so the intended parallel pattern is one matrix
per worker plus :func:`merge_confusion`.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .taxonomy import IGNORE_ID


class ConfusionMatrix:
    """n x n pixel counts; accumulation only ever increases entries."""

    def __init__(self, num_classes: int, counts=None):
        if num_classes < 1:
            raise ValueError(f"need at least one class, got {num_classes}")
        self.num_classes = num_classes
        if counts is None:
            self.counts = np.zeros((num_classes, num_classes), dtype=np.int64)
        else:
            self.counts = np.asarray(counts, dtype=np.int64)
            if self.counts.shape != (num_classes, num_classes):
                raise ValueError(f"counts must be {num_classes}x{num_classes}")
            if (self.counts < 0).any():
                raise ValueError("counts must be non-negative")

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def copy(self) -> "ConfusionMatrix":
        return ConfusionMatrix(self.num_classes, self.counts.copy())


def accumulate(conf: ConfusionMatrix, pred: np.ndarray, gt: np.ndarray) -> ConfusionMatrix:
    """Add one pred/gt pair into ``conf``; gt pixels equal to 255 are skipped."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"pred shape {pred.shape} does not match gt shape {gt.shape}")
    n = conf.num_classes
    mask = gt != IGNORE_ID
    g = gt[mask].astype(np.int64)
    p = pred[mask].astype(np.int64)
    if g.size:
        if g.min() < 0 or g.max() >= n:
            raise ValueError(f"gt ids outside [0, {n})")
        if p.min() < 0 or p.max() >= n:
            raise ValueError(f"pred ids outside [0, {n})")
        conf.counts += np.bincount(n * g + p, minlength=n * n).reshape(n, n)
    return conf


def merge_confusion(a: ConfusionMatrix, b: ConfusionMatrix) -> ConfusionMatrix:
    """Entrywise sum; commutative and associative, zero matrix is the identity."""
    if a.num_classes != b.num_classes:
        raise ValueError(f"cannot merge {a.num_classes}-class with {b.num_classes}-class matrix")
    return ConfusionMatrix(a.num_classes, a.counts + b.counts)


@dataclass
class EvalReport:
    """Per-class IoU (None = undefined: class absent from both pred and gt),
    their mean over included defined classes, and pixel bookkeeping."""

    per_class_iou: list
    miou: float
    excluded: list
    gt_pixels: list
    total_pixels: int

    def included_classes(self) -> list:
        return [i for i, v in enumerate(self.per_class_iou)
                if v is not None and i not in self.excluded]


def iou_scores(conf: ConfusionMatrix, excluded=()) -> EvalReport:
    """Per-class IoU: diag / (row sum + col sum - diag).

    Classes never seen in ground truth nor prediction have an undefined IoU
    and are omitted from the mean, as are explicitly excluded classes.
    """
    n = conf.num_classes
    excluded = sorted({int(i) for i in excluded})
    if any(not 0 <= i < n for i in excluded):
        raise ValueError(f"excluded ids must be in [0, {n})")
    diag = np.diag(conf.counts)
    rows = conf.counts.sum(axis=1)
    cols = conf.counts.sum(axis=0)
    denom = rows + cols - diag
    per_class = [float(diag[i]) / float(denom[i]) if denom[i] else None for i in range(n)]
    meanable = [per_class[i] for i in range(n) if per_class[i] is not None and i not in excluded]
    miou = float(np.mean(meanable)) if meanable else float("nan")
    return EvalReport(per_class, miou, excluded, [int(r) for r in rows], conf.total)


def _cell(report: EvalReport, i: int) -> str:
    if i in report.excluded:
        return "excluded"
    v = report.per_class_iou[i]
    return "undefined" if v is None else f"{100.0 * v:.2f}"


def format_report(report: EvalReport, class_names) -> dict:
    """Render percentage tables to two decimals: markdown and CSV strings."""
    n = len(report.per_class_iou)
    if len(class_names) != n:
        raise ValueError(f"{n} classes but {len(class_names)} names")
    miou = "undefined" if np.isnan(report.miou) else f"{100.0 * report.miou:.2f}"

    md = ["| class | IoU(%) |", "| --- | --- |"]
    md += [f"| {class_names[i]} | {_cell(report, i)} |" for i in range(n)]
    md.append(f"| **mIoU** | **{miou}** |")

    csv = ["class,iou"]
    csv += [f"{class_names[i]},{_cell(report, i)}" for i in range(n)]
    csv.append(f"mIoU,{miou}")
    return {"markdown": "\n".join(md) + "\n", "csv": "\n".join(csv) + "\n"}


def report_to_dict(report: EvalReport, class_names) -> dict:
    """Structured summary with raw fractions, for machine consumption."""
    return {
        "classes": list(class_names),
        "per_class_iou": [None if v is None else float(v) for v in report.per_class_iou],
        "miou": None if np.isnan(report.miou) else float(report.miou),
        "excluded": list(report.excluded),
        "gt_pixels": list(report.gt_pixels),
        "total_pixels": report.total_pixels,
    }
