"""Axis-aligned boxes, overlap, and the Gaussian/IoU sample machinery."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class BBox:
    """Top-left corner plus size, in (sub)pixel units."""

    x: float
    y: float
    w: float
    h: float

    def __post_init__(self):
        if self.w <= 0 or self.h <= 0:
            raise ValueError(f"box needs positive size, got w={self.w}, h={self.h}")

    @property
    def cx(self) -> float:
        return self.x + self.w / 2.0

    @property
    def cy(self) -> float:
        return self.y + self.h / 2.0

    def center(self) -> tuple[float, float]:
        return self.cx, self.cy

    def translated(self, dx: float, dy: float) -> "BBox":
        return BBox(self.x + dx, self.y + dy, self.w, self.h)

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.w, self.h], dtype=np.float64)

    def rounded(self) -> tuple[int, int, int, int]:
        return (int(round(self.x)), int(round(self.y)), int(round(self.w)), int(round(self.h)))


def iou(a: BBox, b: BBox) -> float:
    """Intersection over union, in [0,1]."""
    ix = min(a.x + a.w, b.x + b.w) - max(a.x, b.x)
    iy = min(a.y + a.h, b.y + b.h) - max(a.y, b.y)
    if ix <= 0 or iy <= 0:
        return 0.0
    inter = ix * iy
    union = a.w * a.h + b.w * b.h - inter
    return float(inter / union)


def clip_box(box: BBox, width: float, height: float, min_size: float = 4.0) -> BBox:
    """Keep the box inside the frame without collapsing it."""
    w = min(max(box.w, min_size), width)
    h = min(max(box.h, min_size), height)
    x = min(max(box.x, 0.0), width - w)
    y = min(max(box.y, 0.0), height - h)
    return BBox(x, y, w, h)


def gaussian_sample(center: BBox, n: int, trans_sigma: float, scale_sigma: float,
                    rng: np.random.Generator, scale_base: float = 1.05) -> list[BBox]:
    """Draw n boxes around ``center``.

    Translations are N(0, (trans_sigma * mean(w,h))^2) per axis; the size is
    scaled by scale_base**N(0, scale_sigma^2), aspect preserved.
    """
    if n < 1:
        raise ValueError("need n >= 1 samples")
    mean_wh = (center.w + center.h) / 2.0
    dx = rng.normal(0.0, 1.0, n) * trans_sigma * mean_wh
    dy = rng.normal(0.0, 1.0, n) * trans_sigma * mean_wh
    ds = scale_base ** (rng.normal(0.0, 1.0, n) * scale_sigma)
    out = []
    for i in range(n):
        w = center.w * ds[i]
        h = center.h * ds[i]
        out.append(BBox(center.cx + dx[i] - w / 2.0, center.cy + dy[i] - h / 2.0, w, h))
    return out


@dataclass
class SampleSet:
    boxes: list[BBox]
    labels: np.ndarray  # 1 positive, 0 negative
    iou_to_gt: np.ndarray


def _propose_positive(gt: BBox, n: int, rng) -> list[BBox]:
    return gaussian_sample(gt, n, trans_sigma=0.1, scale_sigma=0.3, rng=rng)


def _propose_negative(gt: BBox, n: int, rng, width, height) -> list[BBox]:
    # half nearby (hard-ish), half uniform over the frame
    near = gaussian_sample(gt, n // 2 + 1, trans_sigma=1.0, scale_sigma=1.0, rng=rng)
    uni = []
    for _ in range(n - len(near)):
        w = gt.w * rng.uniform(0.5, 2.0)
        h = gt.h * rng.uniform(0.5, 2.0)
        uni.append(BBox(rng.uniform(0, max(width - w, 1e-3)), rng.uniform(0, max(height - h, 1e-3)), w, h))
    return near + uni


def harvest_samples(gt: BBox, n_pos: int, n_neg: int, rng: np.random.Generator,
                    width: float, height: float,
                    pos_iou: float = 0.7, neg_iou: float = 0.5) -> SampleSet:
    """Rejection-sample boxes until the IoU gates are met exactly.

    Positives must overlap gt with IoU > pos_iou, negatives with IoU < neg_iou.
    Gives up (with the failing gate named) after 100x the requested count.
    """
    pos: list[BBox] = []
    neg: list[BBox] = []
    attempts_pos = attempts_neg = 0
    max_pos = 100 * max(n_pos, 1)
    max_neg = 100 * max(n_neg, 1)
    while len(pos) < n_pos:
        batch = _propose_positive(gt, min(4 * n_pos, max_pos), rng)
        attempts_pos += len(batch)
        for b in batch:
            if len(pos) >= n_pos:
                break
            b = clip_box(b, width, height, min_size=2.0)
            if iou(b, gt) > pos_iou:
                pos.append(b)
        if attempts_pos >= max_pos and len(pos) < n_pos:
            raise RuntimeError(
                f"could not harvest {n_pos} positives with IoU > {pos_iou} "
                f"after {attempts_pos} proposals"
            )
    while len(neg) < n_neg:
        batch = _propose_negative(gt, min(4 * n_neg, max_neg), rng, width, height)
        attempts_neg += len(batch)
        for b in batch:
            if len(neg) >= n_neg:
                break
            b = clip_box(b, width, height, min_size=2.0)
            if iou(b, gt) < neg_iou:
                neg.append(b)
        if attempts_neg >= max_neg and len(neg) < n_neg:
            raise RuntimeError(
                f"could not harvest {n_neg} negatives with IoU < {neg_iou} "
                f"after {attempts_neg} proposals"
            )
    boxes = pos + neg
    labels = np.array([1] * n_pos + [0] * n_neg, dtype=np.int64)
    overlaps = np.array([iou(b, gt) for b in boxes])
    return SampleSet(boxes=boxes, labels=labels, iou_to_gt=overlaps)


def encode_deltas(anchor: BBox, target: BBox) -> np.ndarray:
    """Normalized (dx, dy, dw, dh) regression targets."""
    return np.array(
        [
            (target.cx - anchor.cx) / anchor.w,
            (target.cy - anchor.cy) / anchor.h,
            np.log(target.w / anchor.w),
            np.log(target.h / anchor.h),
        ]
    )


def decode_deltas(anchor: BBox, deltas: np.ndarray) -> BBox:
    dx, dy, dw, dh = (float(v) for v in deltas)
    # clamp the log-size terms so a wild regression cannot explode the box
    dw = min(max(dw, -1.0), 1.0)
    dh = min(max(dh, -1.0), 1.0)
    cx = anchor.cx + dx * anchor.w
    cy = anchor.cy + dy * anchor.h
    w = anchor.w * np.exp(dw)
    h = anchor.h * np.exp(dh)
    return BBox(cx - w / 2.0, cy - h / 2.0, w, h)
