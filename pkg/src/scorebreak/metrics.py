"""Segmentation-quality metrics used to measure attack damage.

Binary maps: MAE, Pearson CC, S-measure, mean E-measure. Multi-class maps:
mIoU and pixel accuracy. ``pred`` is a probability map in [0, 1] and ``gt`` a
{0, 1} map of the same ``H x W`` shape unless stated otherwise.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np

_EPS = np.spacing(1)


def _pair(pred, gt):
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs gt {gt.shape}")
    return pred, gt


def mae(pred, gt) -> float:
    pred, gt = _pair(pred, gt)
    return float(np.mean(np.abs(pred - gt)))


def cc(pred, gt, return_flag: bool = False):
    """Pearson correlation over pixels; 0 (flagged) when either map is constant."""
    pred, gt = _pair(pred, gt)
    p = pred.ravel() - pred.mean()
    g = gt.ravel() - gt.mean()
    denom = np.sqrt(np.dot(p, p) * np.dot(g, g))
    degenerate = not denom > 0
    value = 0.0 if degenerate else float(np.clip(np.dot(p, g) / denom, -1.0, 1.0))
    return (value, degenerate) if return_flag else value


def confusion_matrix(pred_classes, gt_classes, n_classes: int) -> np.ndarray:
    """Rows are ground truth, columns prediction."""
    pred_classes = np.asarray(pred_classes).ravel().astype(np.int64)
    gt_classes = np.asarray(gt_classes).ravel().astype(np.int64)
    return np.bincount(n_classes * gt_classes + pred_classes,
                       minlength=n_classes ** 2).reshape(n_classes, n_classes)


def miou_acc(pred_classes, gt_classes, n_classes: int | None = None) -> tuple[float, float]:
    """Mean IoU over classes present in gt or pred, and pixel accuracy."""
    pred_classes = np.asarray(pred_classes)
    gt_classes = np.asarray(gt_classes)
    if pred_classes.shape != gt_classes.shape:
        raise ValueError(f"shape mismatch: {pred_classes.shape} vs {gt_classes.shape}")
    if n_classes is None:
        n_classes = int(max(pred_classes.max(initial=0), gt_classes.max(initial=0))) + 1
    cm = confusion_matrix(pred_classes, gt_classes, n_classes)
    inter = np.diag(cm)
    union = cm.sum(0) + cm.sum(1) - inter
    present = union > 0
    miou = float(np.mean(inter[present] / union[present])) if present.any() else 1.0
    acc = float(inter.sum() / cm.sum()) if cm.sum() else 1.0
    return miou, acc


# -- S-measure ------------------------------------------------------------------

def _object_score(pred, gt) -> float:
    x = pred[gt]
    mean = x.mean()
    std = x.std(ddof=1)
    return 2.0 * mean / (mean ** 2 + 1.0 + std + _EPS)


def _ssim(pred, gt) -> float:
    n = pred.size
    x, y = pred.mean(), gt.mean()
    sx = ((pred - x) ** 2).sum() / (n - 1)
    sy = ((gt - y) ** 2).sum() / (n - 1)
    sxy = ((pred - x) * (gt - y)).sum() / (n - 1)
    a = 4 * x * y * sxy
    b = (x ** 2 + y ** 2) * (sx + sy)
    if a != 0:
        return a / (b + _EPS)
    return 1.0 if b == 0 else 0.0


def s_measure(pred, gt, alpha: float = 0.5) -> float:
    """Structure measure: alpha * object-aware + (1 - alpha) * region-aware similarity."""
    pred, gt = _pair(pred, gt)
    gt = gt > 0.5
    y = gt.mean()
    if y == 0:
        return float(1.0 - pred.mean())
    if y == 1:
        return float(pred.mean())

    fg = pred * gt
    bg = (1.0 - pred) * (~gt)
    s_obj = y * _object_score(fg, gt) + (1 - y) * _object_score(bg, ~gt)

    h, w = gt.shape
    # centroid, 1-based and rounded, splits the map into four quadrants
    rows, cols = np.nonzero(gt)
    cy = int(np.round(rows.mean())) + 1
    cx = int(np.round(cols.mean())) + 1
    weights = (cx * cy / (h * w), (w - cx) * cy / (h * w), cx * (h - cy) / (h * w))
    weights = weights + (1.0 - sum(weights),)
    quads = [(slice(0, cy), slice(0, cx)), (slice(0, cy), slice(cx, w)),
             (slice(cy, h), slice(0, cx)), (slice(cy, h), slice(cx, w))]
    s_reg = 0.0
    for wq, (rs, cs) in zip(weights, quads):
        if wq:
            s_reg += wq * _ssim(pred[rs, cs], gt[rs, cs].astype(np.float64))
    return float(max(0.0, alpha * s_obj + (1 - alpha) * s_reg))


# -- E-measure ------------------------------------------------------------------

def _enhanced_alignment(fm: np.ndarray, gt: np.ndarray) -> float:
    n = gt.size
    if not gt.any():
        total = np.sum(~fm)
    elif gt.all():
        total = np.sum(fm)
    else:
        f = fm.astype(np.float64)
        g = gt.astype(np.float64)
        df, dg = f - f.mean(), g - g.mean()
        align = 2 * df * dg / (df ** 2 + dg ** 2 + _EPS)
        total = np.sum((align + 1) ** 2 / 4)
    return float(total / (n - 1 + _EPS))


def e_measure(pred, gt, n_thresholds: int = 256) -> float:
    """Mean enhanced-alignment measure over thresholds on the 8-bit prediction."""
    pred, gt = _pair(pred, gt)
    gt = gt > 0.5
    levels = np.floor(pred * 255).astype(np.int64)
    thresholds = np.linspace(0, 255, n_thresholds).round().astype(np.int64)
    return float(np.mean([_enhanced_alignment(levels >= k, gt) for k in thresholds]))


# -- reports --------------------------------------------------------------------

BINARY_METRICS = ("mae", "cc", "s_measure", "e_measure", "miou", "acc")
MULTICLASS_METRICS = ("miou", "acc")


def evaluate_binary(prob, gt) -> dict[str, float]:
    """All binary metrics for one ``H x W`` foreground-probability map."""
    prob = np.asarray(prob, dtype=np.float64)
    gt = np.asarray(gt)
    c, degenerate = cc(prob, gt, return_flag=True)
    miou, acc = miou_acc((prob >= 0.5).astype(np.int64), gt.astype(np.int64), 2)
    return {"mae": mae(prob, gt), "cc": c, "s_measure": s_measure(prob, gt),
            "e_measure": e_measure(prob, gt), "miou": miou, "acc": acc,
            "cc_degenerate": float(degenerate)}


def evaluate_multiclass(probs, gt, n_classes: int) -> dict[str, float]:
    miou, acc = miou_acc(np.argmax(probs, axis=-1), gt, n_classes)
    return {"miou": miou, "acc": acc}


def evaluate(probs, gt, n_classes: int) -> dict[str, float]:
    """Dispatch on the task: ``probs`` is ``H x W x K`` (K=1 for binary)."""
    probs = np.asarray(probs)
    if n_classes == 2:
        return evaluate_binary(probs[..., 0], gt)
    return evaluate_multiclass(probs, gt, n_classes)


@dataclass
class MetricReport:
    """Per-image metric rows plus dataset means."""

    rows: list[dict] = field(default_factory=list)

    def add(self, image_id: str, values: dict[str, float]) -> None:
        self.rows.append({"image_id": image_id, **values})

    @property
    def metric_names(self) -> list[str]:
        names: list[str] = []
        for r in self.rows:
            names.extend(k for k in r if k != "image_id" and k not in names)
        return names

    def means(self) -> dict[str, float]:
        return {k: float(np.mean([r[k] for r in self.rows if k in r])) for k in self.metric_names}

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=["image_id", *self.metric_names])
            w.writeheader()
            for r in self.rows:
                w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})

    def to_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump({"n_images": len(self.rows), "means": self.means()}, fh, indent=2, sort_keys=True)
