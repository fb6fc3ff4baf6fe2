"""Pseudo-mask evaluation: mIoU, class-agnostic boundary P/R/F1, confusion ratio."""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Sequence

import numpy as np
from scipy import ndimage

from .errors import ShapeError


@dataclass
class MIoUReport:
    iou: np.ndarray  # per class 0..C, nan where excluded
    mean: float
    confusion: np.ndarray  # rows gt, cols pred


@dataclass
class BoundaryReport:
    recall: float
    precision: float
    f1: float
    tolerance: float
    # raw counts, for pooling over a dataset
    pred_matched: int = 0
    pred_total: int = 0
    gt_matched: int = 0
    gt_total: int = 0


@dataclass
class ConfusionRatioReport:
    context: int
    target: int
    fp: int
    tp: int
    m: float  # nan when tp == 0
    iou: float = float("nan")

    @property
    def defined(self) -> bool:
        return self.tp > 0


def confusion_matrix(pred, gt, num_classes: int) -> np.ndarray:
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise ShapeError(f"prediction {pred.shape} vs ground truth {gt.shape}")
    n = num_classes + 1
    for name, a in (("prediction", pred), ("ground truth", gt)):
        if a.size and (a.min() < 0 or a.max() >= n):
            raise ShapeError(f"{name} label outside 0..{num_classes}")
    idx = gt.astype(np.int64).ravel() * n + pred.astype(np.int64).ravel()
    return np.bincount(idx, minlength=n * n).reshape(n, n)


def miou(preds: Sequence, gts: Sequence, num_classes: int) -> MIoUReport:
    """Global confusion matrix over all images; classes absent from both gt and pred are excluded."""
    if len(preds) != len(gts):
        raise ShapeError(f"{len(preds)} predictions for {len(gts)} ground truths")
    conf = np.zeros((num_classes + 1, num_classes + 1), dtype=np.int64)
    for p, g in zip(preds, gts):
        conf += confusion_matrix(p, g, num_classes)
    tp = np.diag(conf).astype(np.float64)
    union = conf.sum(axis=0) + conf.sum(axis=1) - tp
    with np.errstate(invalid="ignore", divide="ignore"):
        iou = np.where(union > 0, tp / union, np.nan)
    mean = float(np.nanmean(iou)) if np.any(union > 0) else float("nan")
    return MIoUReport(iou, mean, conf)


# ------------------------------------------------------------------ edges

def laplacian_edges(mask) -> np.ndarray:
    """Edge pixels of a label map.

    Labels are categorical, so the 4-neighbour Laplacian (replicated border)
    is taken on each class's indicator; a pixel is an edge where any of
    them is nonzero.
    """
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise ShapeError(f"label map must be 2-D, got {mask.shape}")
    stencil = np.array([[0, 1, 0], [1, -4, 1], [0, 1, 0]])
    edges = np.zeros(mask.shape, dtype=bool)
    for lab in np.unique(mask):
        ind = (mask == lab).astype(np.int64)
        edges |= ndimage.convolve(ind, stencil, mode="nearest") != 0
    return edges


def neighbour_diff_edges(mask) -> np.ndarray:
    """Pixels with at least one 4-neighbour of a different label."""
    mask = np.asarray(mask)
    p = np.pad(mask, 1, mode="edge")
    c = p[1:-1, 1:-1]
    return (p[:-2, 1:-1] != c) | (p[2:, 1:-1] != c) | (p[1:-1, :-2] != c) | (p[1:-1, 2:] != c)


def _matched(src: np.ndarray, dst: np.ndarray, tol: float) -> int:
    """How many ``src`` edge pixels lie within ``tol`` (Euclidean) of a ``dst`` edge pixel."""
    if not src.any():
        return 0
    if not dst.any():
        return 0
    dist = ndimage.distance_transform_edt(~dst)
    return int((dist[src] <= tol).sum())


def _ratio(num, den, both_empty):
    if den > 0:
        return num / den
    return 1.0 if both_empty else 0.0


def _f1(p, r):
    return 2 * p * r / (p + r) if p + r > 0 else 0.0


def boundary_prf(pred, gt, tolerance: float = 2.0) -> BoundaryReport:
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise ShapeError(f"prediction {pred.shape} vs ground truth {gt.shape}")
    if tolerance < 0:
        raise ValueError("tolerance must be non-negative")
    pe, ge = laplacian_edges(pred), laplacian_edges(gt)
    pm, gm = _matched(pe, ge, tolerance), _matched(ge, pe, tolerance)
    return _boundary_from_counts(pm, int(pe.sum()), gm, int(ge.sum()), tolerance)


def _boundary_from_counts(pm, pt, gm, gt_total, tolerance) -> BoundaryReport:
    both_empty = pt == 0 and gt_total == 0
    precision = _ratio(pm, pt, both_empty)
    recall = _ratio(gm, gt_total, both_empty)
    return BoundaryReport(recall, precision, _f1(precision, recall), tolerance, pm, pt, gm, gt_total)


def pooled_boundary(reports: Sequence[BoundaryReport]) -> BoundaryReport:
    """Dataset-level P/R/F1 from summed edge-pixel counts."""
    if not reports:
        raise ValueError("no boundary reports to pool")
    tol = reports[0].tolerance
    return _boundary_from_counts(sum(r.pred_matched for r in reports), sum(r.pred_total for r in reports),
                                 sum(r.gt_matched for r in reports), sum(r.gt_total for r in reports), tol)


# ------------------------------------------------------------ co-occurrence

def confusion_counts(pred, gt, context, k: int, c: int):
    pred, gt, context = np.asarray(pred), np.asarray(gt), np.asarray(context)
    if not pred.shape == gt.shape == context.shape:
        raise ShapeError("pred, gt and context masks must share a shape")
    fp = int(np.count_nonzero((context == k) & (pred == c)))
    tp = int(np.count_nonzero((gt == c) & (pred == c)))
    return fp, tp


def confusion_ratio(pred, gt, context, k: int, c: int) -> ConfusionRatioReport:
    """m = FP(context k predicted as c) / TP(c); nan (flagged undefined) when TP is 0."""
    fp, tp = confusion_counts(pred, gt, context, k, c)
    return ConfusionRatioReport(k, c, fp, tp, fp / tp if tp else float("nan"))


def pooled_confusion_ratio(preds, gts, contexts, k: int, c: int) -> ConfusionRatioReport:
    fp = tp = 0
    for p, g, x in zip(preds, gts, contexts):
        a, b = confusion_counts(p, g, x, k, c)
        fp += a
        tp += b
    return ConfusionRatioReport(k, c, fp, tp, fp / tp if tp else float("nan"))


@dataclass
class EvaluationReport:
    miou: MIoUReport
    boundary: BoundaryReport
    confusion: List[ConfusionRatioReport]


def evaluate(preds, scenes, num_classes: int, pairs: Sequence = (), tolerance: float = 2.0) -> EvaluationReport:
    """All three protocols over a list of predictions and their scenes."""
    gts = [s.gt_mask for s in scenes]
    ctxs = [s.context_mask for s in scenes]
    mi = miou(preds, gts, num_classes)
    br = pooled_boundary([boundary_prf(p, g, tolerance) for p, g in zip(preds, gts)])
    cr = []
    for k, c in pairs:
        r = pooled_confusion_ratio(preds, gts, ctxs, k, c)
        r.iou = float(mi.iou[c])
        cr.append(r)
    return EvaluationReport(mi, br, cr)
