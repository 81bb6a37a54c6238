"""Decision-level refinement: confidence-gated branch between optical-flow
repositioning (confidence below zero) and a classifier-scored local grid
refinement (confidence above zero).

The flow side is pyramidal Lucas-Kanade on the fused-image luminance: a
5-tap-blurred half-resolution pyramid, and per point an iterative 2x2
structure-tensor solve whose estimate doubles when moving down a level.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .boxes import BBox
from .imageops import bilinear_sample, blur5, downsample2

# flow defaults; max_flow is expressed as a fraction of min(box w, box h)
PYRAMID_LEVELS = 3
LK_WINDOW = 15
LK_ITERS = 10
DET_EPS = 1e-6
MAX_FLOW_FRAC = 1.5
GRID_POINTS = 5
REFINE_TRANSLATIONS = (-2.0, -1.0, 0.0, 1.0, 2.0)
REFINE_SCALES = (0.95, 1.0, 1.05)
REFINE_ASPECTS = (0.95, 1.0, 1.05)


@dataclass
class FlowPyramid:
    """Level 0 is the full-resolution image; each next level is blurred and
    2x-downsampled (dims ceil(previous/2))."""

    levels: list[np.ndarray]

    @property
    def n_levels(self) -> int:
        return len(self.levels)


@dataclass(frozen=True)
class Displacement:
    dx: float
    dy: float

    def magnitude(self) -> float:
        return float(np.hypot(self.dx, self.dy))


def build_pyramid(image: np.ndarray, n_levels: int = PYRAMID_LEVELS) -> FlowPyramid:
    if image.ndim == 3 and image.shape[0] == 1:
        image = image[0]
    if image.ndim != 2:
        raise ValueError(f"pyramid needs a [h,w] grayscale image, got shape {image.shape}")
    if n_levels < 1:
        raise ValueError("need at least one pyramid level")
    min_side = (2 ** (n_levels - 1)) * 8
    if image.shape[0] < min_side or image.shape[1] < min_side:
        raise ValueError(
            f"image {image.shape} too small for {n_levels} pyramid levels (needs >= {min_side} per side)"
        )
    levels = [np.asarray(image, dtype=np.float64)]
    for _ in range(n_levels - 1):
        levels.append(downsample2(blur5(levels[-1])))
    return FlowPyramid(levels=levels)


def lk_flow(prev: FlowPyramid, curr: FlowPyramid, points, window: int = LK_WINDOW,
            iters: int = LK_ITERS, det_eps: float = DET_EPS,
            max_flow: float | None = None) -> list[Displacement | None]:
    """Track ``points`` (x, y) from prev to curr; None marks a dropped point.

    A point is dropped when its structure tensor is degenerate at every level
    while the image actually changed, or when the displacement exceeds
    ``max_flow``.  Raises when every point is dropped.
    """
    if prev.n_levels != curr.n_levels:
        raise ValueError("pyramids have different depths")
    for a, b in zip(prev.levels, curr.levels):
        if a.shape != b.shape:
            raise ValueError("pyramids have different level geometry")
    if window % 2 != 1:
        raise ValueError("window must be odd")
    pts = np.asarray([[float(x), float(y)] for x, y in points])
    n = pts.shape[0]
    if n == 0:
        raise ValueError("no points to track")
    r = window // 2
    offs = np.arange(-r, r + 1, dtype=np.float64)
    oy = np.broadcast_to(offs[:, None], (window, window))
    ox = np.broadcast_to(offs[None, :], (window, window))

    d = np.zeros((n, 2))  # (dx, dy) at the current level's scale
    solved_any = np.zeros(n, dtype=bool)
    for level in reversed(range(prev.n_levels)):
        img0 = prev.levels[level]
        img1 = curr.levels[level]
        gy_img, gx_img = np.gradient(img0)
        scale = 2.0**level
        px = pts[:, 0] / scale
        py = pts[:, 1] / scale
        ys = py[:, None, None] + oy[None]
        xs = px[:, None, None] + ox[None]
        i0 = bilinear_sample(img0, ys, xs)
        ix = bilinear_sample(gx_img, ys, xs)
        iy = bilinear_sample(gy_img, ys, xs)
        gxx = (ix * ix).sum(axis=(1, 2))
        gxy = (ix * iy).sum(axis=(1, 2))
        gyy = (iy * iy).sum(axis=(1, 2))
        det = gxx * gyy - gxy * gxy
        ok = det > det_eps
        solved_any |= ok
        for _ in range(iters):
            i1 = bilinear_sample(img1, ys + d[:, 1][:, None, None], xs + d[:, 0][:, None, None])
            diff = i0 - i1
            ex = (diff * ix).sum(axis=(1, 2))
            ey = (diff * iy).sum(axis=(1, 2))
            step_x = np.where(ok, (gyy * ex - gxy * ey) / np.where(ok, det, 1.0), 0.0)
            step_y = np.where(ok, (gxx * ey - gxy * ex) / np.where(ok, det, 1.0), 0.0)
            d[:, 0] += step_x
            d[:, 1] += step_y
            if max(np.abs(step_x).max(), np.abs(step_y).max()) < 0.01:
                break
        if level > 0:
            d *= 2.0

    # a never-solved point survives only if the finest-level patch truly did
    # not change (e.g. identical frames): then zero flow is exact
    i1_final = bilinear_sample(curr.levels[0], pts[:, 1][:, None, None] + oy[None] + d[:, 1][:, None, None],
                               pts[:, 0][:, None, None] + ox[None] + d[:, 0][:, None, None])
    i0_final = bilinear_sample(prev.levels[0], pts[:, 1][:, None, None] + oy[None],
                               pts[:, 0][:, None, None] + ox[None])
    residual = np.abs(i0_final - i1_final).mean(axis=(1, 2))

    out: list[Displacement | None] = []
    for i in range(n):
        if not solved_any[i]:
            if residual[i] < 1e-9:
                out.append(Displacement(0.0, 0.0))
            else:
                out.append(None)
            continue
        mag = float(np.hypot(d[i, 0], d[i, 1]))
        if not np.isfinite(mag) or (max_flow is not None and mag > max_flow):
            out.append(None)
            continue
        out.append(Displacement(float(d[i, 0]), float(d[i, 1])))
    if all(v is None for v in out):
        raise RuntimeError(f"optical flow untrackable: all {n} points dropped")
    return out


def seed_grid(box: BBox, grid: int = GRID_POINTS) -> list[tuple[float, float]]:
    """Uniform grid of grid x grid points inside the box."""
    return [
        (box.x + (i + 0.5) * box.w / grid, box.y + (j + 0.5) * box.h / grid)
        for j in range(grid)
        for i in range(grid)
    ]


@dataclass
class FlowDiagnostics:
    points: list[tuple[float, float]] = field(default_factory=list)
    displacements: list[Displacement | None] = field(default_factory=list)
    untrackable: bool = False

    def mean_displacement(self) -> tuple[float, float]:
        kept = [d for d in self.displacements if d is not None]
        if not kept:
            return 0.0, 0.0
        return float(np.mean([d.dx for d in kept])), float(np.mean([d.dy for d in kept]))


def flow_reposition(prev_box: BBox, search_box: BBox, prev_gray: np.ndarray,
                    curr_gray: np.ndarray, n_levels: int = PYRAMID_LEVELS,
                    window: int = LK_WINDOW, iters: int = LK_ITERS,
                    det_eps: float = DET_EPS, max_flow_frac: float = MAX_FLOW_FRAC,
                    grid: int = GRID_POINTS) -> tuple[BBox, FlowDiagnostics]:
    """Translate the locally-searched box by the mean surviving displacement
    of a point grid seeded in the previous box.

    Untrackable motion degrades to returning the search box unchanged, with
    the diagnostics flagged.
    """
    diag = FlowDiagnostics(points=seed_grid(prev_box, grid))
    try:
        prev_pyr = build_pyramid(prev_gray, n_levels)
        curr_pyr = build_pyramid(curr_gray, n_levels)
        max_flow = max_flow_frac * min(prev_box.w, prev_box.h)
        diag.displacements = lk_flow(prev_pyr, curr_pyr, diag.points, window=window,
                                     iters=iters, det_eps=det_eps, max_flow=max_flow)
    except (RuntimeError, ValueError):
        diag.untrackable = True
        diag.displacements = [None] * len(diag.points)
        return search_box, diag
    dx, dy = diag.mean_displacement()
    return search_box.translated(dx, dy), diag


def refine_candidates(box: BBox) -> list[tuple[float, BBox]]:
    """Perturbation grid around a box, ordered smallest perturbation first."""
    cells = []
    for dx in REFINE_TRANSLATIONS:
        for dy in REFINE_TRANSLATIONS:
            for s in REFINE_SCALES:
                for a in REFINE_ASPECTS:
                    w = box.w * s * a
                    h = box.h * s / a
                    cand = BBox(box.cx + dx - w / 2.0, box.cy + dy - h / 2.0, w, h)
                    key = (abs(dx) + abs(dy) + 40.0 * (abs(s - 1.0) + abs(a - 1.0)), abs(dx), abs(dy), s, a)
                    cells.append((key, cand))
    cells.sort(key=lambda kc: kc[0])
    return [(k[0], c) for k, c in cells]


def refine_box(score_fn, box: BBox) -> BBox:
    """Pick the classifier-preferred cell of a deterministic local grid;
    exact ties go to the smallest perturbation (the input box when all
    scores are equal)."""
    cells = refine_candidates(box)
    boxes = [c for _, c in cells]
    scores = np.asarray(score_fn(boxes), dtype=np.float64)
    if scores.shape != (len(boxes),):
        raise ValueError(f"score_fn returned shape {scores.shape} for {len(boxes)} boxes")
    best = int(np.argmax(scores))  # first index wins ties; cells are sorted by perturbation
    return boxes[best]


def drm_decide(c_s: float, box: BBox, refine_fn, flow_fn) -> tuple[BBox, str]:
    """Branch purely on the sign of the confidence score.

    ``refine_fn(box) -> BBox`` and ``flow_fn(box) -> BBox`` are the two
    strategies; a confidence of exactly zero passes the box through.
    """
    if c_s > 0:
        return refine_fn(box), "refine"
    if c_s < 0:
        return flow_fn(box), "flow"
    return box, "none"
