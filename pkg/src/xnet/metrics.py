"""Precision/success tracking metrics and report emission."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .boxes import BBox, iou

PR_THRESHOLDS = np.arange(0, 51, dtype=np.float64)  # 0..50 px
SR_THRESHOLDS = np.arange(0, 21, dtype=np.float64) * 0.05  # 0..1


def _check_lengths(pred, gt):
    if len(pred) != len(gt):
        raise ValueError(f"prediction/ground-truth length mismatch: {len(pred)} vs {len(gt)}")
    if not pred:
        raise ValueError("empty sequences have no metrics")


def center_errors(pred: list[BBox], gt: list[BBox]) -> np.ndarray:
    _check_lengths(pred, gt)
    return np.array([np.hypot(p.cx - g.cx, p.cy - g.cy) for p, g in zip(pred, gt)])


def overlaps(pred: list[BBox], gt: list[BBox]) -> np.ndarray:
    _check_lengths(pred, gt)
    return np.array([iou(p, g) for p, g in zip(pred, gt)])


def precision_rate(pred: list[BBox], gt: list[BBox], threshold_px: float) -> float:
    """Fraction of frames whose predicted center is within the threshold."""
    return float((center_errors(pred, gt) <= threshold_px).mean())


def success_rate(pred: list[BBox], gt: list[BBox]) -> tuple[np.ndarray, float]:
    """Success curve over IoU thresholds 0..1 (step 0.05) and its trapezoid AUC."""
    ious = overlaps(pred, gt)
    curve = np.array([(ious > t).mean() for t in SR_THRESHOLDS])
    auc = float(np.trapezoid(curve, SR_THRESHOLDS))
    return curve, auc


@dataclass
class MetricsReport:
    pr_at: float
    sr_auc: float
    threshold_px: float
    pr_curve: np.ndarray  # over PR_THRESHOLDS
    sr_curve: np.ndarray  # over SR_THRESHOLDS

    def to_dict(self) -> dict:
        return {
            "pr_at": self.pr_at,
            "sr_auc": self.sr_auc,
            "threshold_px": self.threshold_px,
            "pr_curve": [float(v) for v in self.pr_curve],
            "sr_curve": [float(v) for v in self.sr_curve],
        }


def compute_report(pred: list[BBox], gt: list[BBox], threshold_px: float = 20.0) -> MetricsReport:
    errors = center_errors(pred, gt)
    pr_curve = np.array([(errors <= t).mean() for t in PR_THRESHOLDS])
    sr_curve, auc = success_rate(pred, gt)
    return MetricsReport(
        pr_at=float((errors <= threshold_px).mean()),
        sr_auc=auc,
        threshold_px=threshold_px,
        pr_curve=pr_curve,
        sr_curve=sr_curve,
    )


def write_report(report: MetricsReport, out_dir, stem: str = "metrics") -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    json_path = out_dir / f"{stem}.json"
    json_path.write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
    with open(out_dir / f"{stem}_pr_curve.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["threshold_px", "precision"])
        for t, v in zip(PR_THRESHOLDS, report.pr_curve):
            w.writerow([f"{t:.0f}", f"{v:.6f}"])
    with open(out_dir / f"{stem}_sr_curve.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["iou_threshold", "success"])
        for t, v in zip(SR_THRESHOLDS, report.sr_curve):
            w.writerow([f"{t:.2f}", f"{v:.6f}"])
    return json_path


def _draw_box(img: np.ndarray, box: BBox, color) -> None:
    h, w, _ = img.shape
    x0, y0 = int(round(box.x)), int(round(box.y))
    x1, y1 = int(round(box.x + box.w)), int(round(box.y + box.h))
    x0, x1 = max(x0, 0), min(x1, w - 1)
    y0, y1 = max(y0, 0), min(y1, h - 1)
    if x0 >= x1 or y0 >= y1:
        return
    img[y0, x0:x1] = color
    img[y1, x0:x1] = color
    img[y0:y1, x0] = color
    img[y0:y1, x1] = color


def render_overlays(frames, pred: list[BBox], gt: list[BBox], out_dir) -> None:
    """Write per-frame PNGs with the prediction in red and the truth in green."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for i, (pair, p, g) in enumerate(zip(frames, pred, gt)):
        img = np.clip(np.rint(pair.rgb.data * 255), 0, 255).astype(np.uint8).transpose(1, 2, 0).copy()
        _draw_box(img, g, (0, 255, 0))
        _draw_box(img, p, (255, 0, 0))
        Image.fromarray(img).save(out_dir / f"{i:05d}.png")
