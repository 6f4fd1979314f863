"""Generalized Dice loss, per-class Dice, confusion matrices and tissue volumes."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .volume_io import CLASS_NAMES, N_CLASSES, BACKGROUND, LabelVolume

DICE_EPS = 1e-5


def generalized_dice_loss(pred, truth, eps=DICE_EPS, norm="l2", class_axis=None):
    """Return ``(loss, d loss / d pred)``.

    ``loss = 1 - mean_i (2 y_i.t_i + eps) / (|y_i|^2 + |t_i|^2 + eps)`` with the
    inner products taken over every voxel (and batch entry). ``norm="l1"``
    swaps the denominator for ``sum(y_i) + sum(t_i)``. ``class_axis``
    defaults to 1 for 5-D input and 0 otherwise.
    """
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs truth {truth.shape}")
    if not (np.all(np.isfinite(pred)) and np.all(np.isfinite(truth))):
        raise ValueError("non-finite values in loss inputs")
    if class_axis is None:
        class_axis = 1 if pred.ndim == 5 else 0
    y = np.moveaxis(pred, class_axis, 0).reshape(pred.shape[class_axis], -1).astype(np.float64)
    t = np.moveaxis(truth, class_axis, 0).reshape(truth.shape[class_axis], -1).astype(np.float64)
    n_cls = y.shape[0]
    inter = np.einsum("cv,cv->c", y, t)
    if norm == "l2":
        denom = np.einsum("cv,cv->c", y, y) + np.einsum("cv,cv->c", t, t) + eps
    elif norm == "l1":
        denom = y.sum(axis=1) + t.sum(axis=1) + eps
    else:
        raise ValueError(f"norm must be 'l2' or 'l1', got {norm!r}")
    num = 2 * inter + eps
    loss = 1.0 - np.mean(num / denom)
    d_denom = 2 * y if norm == "l2" else np.ones_like(y)
    g = -(2 * t * denom[:, None] - num[:, None] * d_denom) / (denom[:, None] ** 2) / n_cls
    moved_shape = (pred.shape[class_axis],) + tuple(np.delete(pred.shape, class_axis))
    g = np.moveaxis(g.reshape(moved_shape), 0, class_axis)
    return float(loss), g.astype(pred.dtype)


# --------------------------------------------------------------------------
# hard-label metrics
# --------------------------------------------------------------------------

def _labels(v):
    return v.labels if isinstance(v, LabelVolume) else np.asarray(v)


def dice_score(a, b, c: int):
    """Binary Dice for class ``c``; ``None`` when the class is absent from both."""
    a, b = _labels(a), _labels(b)
    if a.shape != b.shape:
        raise ValueError(f"dims mismatch {a.shape} vs {b.shape}")
    ma, mb = a == c, b == c
    total = int(ma.sum()) + int(mb.sum())
    if total == 0:
        return None
    return 2.0 * int(np.count_nonzero(ma & mb)) / total


@dataclass
class DiceReport:
    per_class: list
    truth_counts: list
    pred_counts: list

    @property
    def mean(self):
        """Mean over classes present in either volume (background included)."""
        vals = [d for d in self.per_class if d is not None]
        return float(np.mean(vals)) if vals else float("nan")

    @property
    def mean_without_background(self):
        vals = [d for i, d in enumerate(self.per_class) if d is not None and i != BACKGROUND]
        return float(np.mean(vals)) if vals else float("nan")


def dice_report(truth, pred, n_classes=N_CLASSES) -> DiceReport:
    t, p = _labels(truth), _labels(pred)
    if t.shape != p.shape:
        raise ValueError(f"dims mismatch {t.shape} vs {p.shape}")
    cm = confusion(t, p, n_classes=n_classes)
    per = []
    for c in range(n_classes):
        total = cm[c].sum() + cm[:, c].sum()
        per.append(None if total == 0 else 2.0 * cm[c, c] / total)
    return DiceReport(per, cm.sum(axis=1).tolist(), cm.sum(axis=0).tolist())


def confusion(truth, pred, mask=None, n_classes=N_CLASSES) -> np.ndarray:
    """Counts with rows = true class, columns = predicted class."""
    t, p = _labels(truth), _labels(pred)
    if t.shape != p.shape:
        raise ValueError(f"dims mismatch {t.shape} vs {p.shape}")
    t = t.astype(np.int64).ravel()
    p = p.astype(np.int64).ravel()
    if mask is not None:
        m = np.asarray(mask, dtype=bool).ravel()
        if m.size != t.size:
            raise ValueError("mask dims mismatch")
        t, p = t[m], p[m]
    return np.bincount(t * n_classes + p, minlength=n_classes**2).reshape(n_classes, n_classes)


def volume_fractions(labels, spacing=None):
    """Per-class volumes (mm^3) and fractions of the head (non-background) volume."""
    lab = _labels(labels)
    if spacing is None:
        spacing = getattr(labels, "spacing", (1.0, 1.0, 1.0))
    voxel = float(np.prod(spacing))
    counts = np.bincount(lab.ravel().astype(np.int64), minlength=N_CLASSES)
    head = counts.sum() - counts[BACKGROUND]
    if head == 0:
        raise ValueError("no head voxels (all background)")
    volumes = {CLASS_NAMES[c]: counts[c] * voxel for c in range(N_CLASSES)}
    fractions = {CLASS_NAMES[c]: counts[c] / head for c in range(N_CLASSES) if c != BACKGROUND}
    return volumes, fractions


def adjacency_count(labels, a: int, b: int) -> int:
    """Face-adjacent voxel pairs with one voxel labelled ``a`` and the other ``b``."""
    lab = _labels(labels)
    n = 0
    for ax in range(3):
        lo = np.take(lab, np.arange(lab.shape[ax] - 1), axis=ax)
        hi = np.take(lab, np.arange(1, lab.shape[ax]), axis=ax)
        n += int(np.count_nonzero((lo == a) & (hi == b)))
        if a != b:
            n += int(np.count_nonzero((lo == b) & (hi == a)))
    return n


# --------------------------------------------------------------------------
# report files (tab separated, header row)
# --------------------------------------------------------------------------

REPORT_FIELDS = ("scan", "class", "dice", "truth_voxels", "pred_voxels")


def dice_rows(scan_id: str, report: DiceReport):
    rows = []
    for c, d in enumerate(report.per_class):
        rows.append({"scan": scan_id, "class": CLASS_NAMES[c],
                     "dice": "absent" if d is None else f"{d:.6f}",
                     "truth_voxels": report.truth_counts[c], "pred_voxels": report.pred_counts[c]})
    rows.append({"scan": scan_id, "class": "mean", "dice": f"{report.mean:.6f}",
                 "truth_voxels": sum(report.truth_counts), "pred_voxels": sum(report.pred_counts)})
    rows.append({"scan": scan_id, "class": "mean_no_background",
                 "dice": f"{report.mean_without_background:.6f}",
                 "truth_voxels": sum(report.truth_counts[1:]),
                 "pred_voxels": sum(report.pred_counts[1:])})
    return rows


def write_tsv(rows, path, fields=None) -> None:
    """Write dict rows to ``path`` (a file name or an open text stream)."""
    rows = list(rows)
    fields = fields or (list(rows[0].keys()) if rows else list(REPORT_FIELDS))
    if hasattr(path, "write"):
        _write_rows(path, rows, fields)
        return
    with open(path, "w", newline="") as fh:
        _write_rows(fh, rows, fields)


def _write_rows(fh, rows, fields):
    w = csv.DictWriter(fh, fieldnames=fields, delimiter="\t", lineterminator="\n")
    w.writeheader()
    w.writerows(rows)


def read_tsv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh, delimiter="\t"))
