"""Sequence ingestion and seeded synthetic RGBT sequence generation.

The on-disk format is one directory per sequence with ``visible/`` and
``infrared/`` image folders plus ``groundTruth.txt`` (one ``x y w h`` line per
frame).  Synthetic sequences render a textured square that is hot in the
thermal channel, with optional distractors that look similar in RGB but stay
cold, covering the low-illumination / fast-motion style challenges at desk
scale.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .boxes import BBox
from .tensor import Tensor


@dataclass
class FramePair:
    """One time step: registered RGB + thermal images, and the fused X image."""

    rgb: Tensor  # [3,H,W] in [0,1]
    thermal: Tensor  # [1,H,W] in [0,1]
    x_modality: Tensor | None = None  # [3,H,W] in [0,1]

    def __post_init__(self):
        if self.rgb.shape[0] != 3 or self.thermal.shape[0] != 1:
            raise ValueError(f"expected rgb [3,H,W] and thermal [1,H,W], got {self.rgb.shape} / {self.thermal.shape}")
        if self.rgb.shape[1:] != self.thermal.shape[1:]:
            raise ValueError(f"rgb and thermal sizes differ: {self.rgb.shape} vs {self.thermal.shape}")
        for name, t in (("rgb", self.rgb), ("thermal", self.thermal)):
            lo, hi = float(t.data.min()), float(t.data.max())
            if lo < -1e-9 or hi > 1.0 + 1e-9:
                raise ValueError(f"{name} values outside [0,1]: min={lo}, max={hi}")

    @property
    def height(self) -> int:
        return self.rgb.shape[1]

    @property
    def width(self) -> int:
        return self.rgb.shape[2]


@dataclass
class SequenceRecord:
    name: str
    frames: list[FramePair]
    gt: list[BBox]
    attributes: list[str] = field(default_factory=list)

    def __post_init__(self):
        if len(self.frames) != len(self.gt):
            raise ValueError(f"{self.name}: {len(self.frames)} frames but {len(self.gt)} gt boxes")
        if len(self.frames) < 2:
            raise ValueError(f"{self.name}: a sequence needs at least 2 frames")
        h, w = self.frames[0].height, self.frames[0].width
        for i, f in enumerate(self.frames):
            if (f.height, f.width) != (h, w):
                raise ValueError(f"{self.name}: frame {i} size {f.height}x{f.width} != {h}x{w}")


# ---------------------------------------------------------------------------
# directory ingestion
# ---------------------------------------------------------------------------

_IMAGE_EXTS = {".png", ".jpg", ".jpeg", ".bmp"}


def _list_images(folder: Path) -> list[Path]:
    return sorted(p for p in folder.iterdir() if p.suffix.lower() in _IMAGE_EXTS)


def load_sequence(seq_dir) -> SequenceRecord:
    seq_dir = Path(seq_dir)
    vis_dir = seq_dir / "visible"
    ir_dir = seq_dir / "infrared"
    gt_file = seq_dir / "groundTruth.txt"
    for p, what in ((vis_dir, "visible/ folder"), (ir_dir, "infrared/ folder"), (gt_file, "groundTruth.txt")):
        if not p.exists():
            raise FileNotFoundError(f"{seq_dir}: missing {what}")
    vis = _list_images(vis_dir)
    ir = _list_images(ir_dir)
    lines = [ln for ln in gt_file.read_text().splitlines() if ln.strip()]
    if not (len(vis) == len(ir) == len(lines)):
        raise ValueError(
            f"{seq_dir}: count mismatch: {len(vis)} visible, {len(ir)} infrared, {len(lines)} gt lines"
        )
    gt = []
    for i, ln in enumerate(lines):
        parts = ln.replace(",", " ").split()
        if len(parts) != 4:
            raise ValueError(f"{gt_file}: line {i + 1} is not 'x y w h': {ln!r}")
        x, y, w, h = (float(v) for v in parts)
        gt.append(BBox(x, y, w, h))
    frames = []
    for v, r in zip(vis, ir):
        rgb = np.asarray(Image.open(v).convert("RGB"), dtype=np.float64).transpose(2, 0, 1) / 255.0
        th = np.asarray(Image.open(r).convert("L"), dtype=np.float64)[None] / 255.0
        frames.append(FramePair(rgb=Tensor(rgb), thermal=Tensor(th)))
    return SequenceRecord(name=seq_dir.name, frames=frames, gt=gt)


def save_sequence(record: SequenceRecord, out_dir) -> None:
    """Write a SequenceRecord in the ingestion layout (round-trip helper)."""
    out_dir = Path(out_dir)
    (out_dir / "visible").mkdir(parents=True, exist_ok=True)
    (out_dir / "infrared").mkdir(parents=True, exist_ok=True)
    lines = []
    for i, (pair, box) in enumerate(zip(record.frames, record.gt)):
        rgb = np.clip(np.rint(pair.rgb.data * 255), 0, 255).astype(np.uint8).transpose(1, 2, 0)
        th = np.clip(np.rint(pair.thermal.data[0] * 255), 0, 255).astype(np.uint8)
        Image.fromarray(rgb).save(out_dir / "visible" / f"{i:05d}.png")
        Image.fromarray(th).save(out_dir / "infrared" / f"{i:05d}.png")
        lines.append(f"{box.x:.2f} {box.y:.2f} {box.w:.2f} {box.h:.2f}")
    (out_dir / "groundTruth.txt").write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# synthetic sequences
# ---------------------------------------------------------------------------

_MOTIONS = ("linear", "jump", "sinusoid")
_ILLUMS = ("normal", "low")


@dataclass
class SynthSpec:
    n_frames: int = 30
    motion: str = "linear"
    distractors: int = 0
    illumination: str = "normal"
    noise_sigma: float = 0.0
    seed: int = 0
    height: int = 64
    width: int = 96
    target_size: int = 16
    jump_px: float = 18.0
    thermal_crossover: float = 0.0  # 0..1 contrast loss in the middle third
    hot_distractors: bool = False  # distractors share the target's heat signature

    def __post_init__(self):
        if self.n_frames < 2:
            raise ValueError("need n_frames >= 2")
        if self.motion not in _MOTIONS:
            raise ValueError(f"motion must be one of {_MOTIONS}, got {self.motion!r}")
        if self.illumination not in _ILLUMS:
            raise ValueError(f"illumination must be one of {_ILLUMS}, got {self.illumination!r}")
        if self.motion == "jump" and self.jump_px < 8.0:
            raise ValueError("jump motion needs a discontinuity of at least 8 px")

    @classmethod
    def from_dict(cls, d: dict) -> "SynthSpec":
        unknown = set(d) - {f for f in cls.__dataclass_fields__}
        if unknown:
            raise ValueError(f"unknown synth spec keys: {sorted(unknown)}")
        return cls(**d)


def _smooth_field(rng, h, w, cells=8, lo=0.0, hi=1.0):
    coarse = rng.random((cells, cells))
    ys = np.linspace(0, cells - 1, h)
    xs = np.linspace(0, cells - 1, w)
    y0 = np.clip(ys.astype(int), 0, cells - 2)
    x0 = np.clip(xs.astype(int), 0, cells - 2)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    field = (
        coarse[np.ix_(y0, x0)] * (1 - fy) * (1 - fx)
        + coarse[np.ix_(y0, x0 + 1)] * (1 - fy) * fx
        + coarse[np.ix_(y0 + 1, x0)] * fy * (1 - fx)
        + coarse[np.ix_(y0 + 1, x0 + 1)] * fy * fx
    )
    return lo + field * (hi - lo)


def _bounce(pos, vel, lo, hi):
    pos += vel
    if pos < lo:
        pos, vel = 2 * lo - pos, -vel
    elif pos > hi:
        pos, vel = 2 * hi - pos, -vel
    return pos, vel


class _Square:
    """A moving textured square; the target is hot, distractors are cold
    unless the spec marks them hot."""

    def __init__(self, rng, size, h, w, mean_rgb, hot, margin=4.0, tint=None):
        self.size = size
        self.h, self.w = h, w
        self.margin = margin
        tex = rng.random((size, size)) * 0.6 + 0.4
        if tint is None:
            tint = rng.permutation(np.array([1.0, 0.75, 0.5]))
        self.tex_rgb = np.clip(tex[None] * tint[:, None, None] / tex.mean() * mean_rgb, 0.0, 1.0)
        self.tex_th = np.clip(0.9 + (tex - tex.mean()) * 0.2, 0.82, 1.0) if hot else None
        self.heat = 1.0  # scales thermal contrast above the background (crossover dial)
        self.x = rng.uniform(margin, w - size - margin)
        self.y = rng.uniform(margin, h - size - margin)
        speed = rng.uniform(1.0, 2.0)
        angle = rng.uniform(0, 2 * np.pi)
        self.vx = speed * np.cos(angle)
        self.vy = speed * np.sin(angle)

    def step(self):
        self.x, self.vx = _bounce(self.x, self.vx, self.margin, self.w - self.size - self.margin)
        self.y, self.vy = _bounce(self.y, self.vy, self.margin, self.h - self.size - self.margin)

    def box(self) -> BBox:
        return BBox(round(self.x), round(self.y), self.size, self.size)

    def paint(self, rgb, thermal):
        x, y, s = int(round(self.x)), int(round(self.y)), self.size
        rgb[:, y : y + s, x : x + s] = self.tex_rgb
        if self.tex_th is not None:
            bg = thermal[y : y + s, x : x + s]
            thermal[y : y + s, x : x + s] = bg + self.heat * (self.tex_th - bg)
        else:
            thermal[y : y + s, x : x + s] = np.clip(thermal[y : y + s, x : x + s] - 0.03, 0.0, 1.0)


def synth_sequence(spec: SynthSpec | dict) -> SequenceRecord:
    if isinstance(spec, dict):
        spec = SynthSpec.from_dict(spec)
    rng = np.random.default_rng(spec.seed)
    h, w = spec.height, spec.width
    low = spec.illumination == "low"

    bg_rgb = np.stack([_smooth_field(rng, h, w, lo=0.25, hi=0.5) for _ in range(3)])
    if low:
        bg_rgb *= 0.3
    bg_th = _smooth_field(rng, h, w, lo=0.05, hi=0.18)

    target_mean = 0.13 if low else 0.65
    target = _Square(rng, spec.target_size, h, w, target_mean, hot=True)
    # aim the target roughly along the long axis so linear runs use the frame
    target.vx = abs(target.vx) if target.x < w / 2 else -abs(target.vx)
    squares = [target]
    # keep distractors initially clear of the target, as far as the frame allows
    max_sep = (w - spec.target_size - 8) + (h - spec.target_size - 8)
    min_sep = min(3 * spec.target_size, 0.6 * max_sep)
    for _ in range(spec.distractors):
        d = _Square(rng, spec.target_size, h, w, target_mean, hot=spec.hot_distractors)
        best = (-1.0, d.x, d.y)
        for _ in range(100):
            sep = abs(d.x - target.x) + abs(d.y - target.y)
            best = max(best, (sep, d.x, d.y))
            if sep >= min_sep:
                break
            d.x = rng.uniform(d.margin, w - d.size - d.margin)
            d.y = rng.uniform(d.margin, h - d.size - d.margin)
        _, d.x, d.y = best
        squares.append(d)

    jump_frame = spec.n_frames // 2
    cross_lo, cross_hi = spec.n_frames // 3, (2 * spec.n_frames) // 3
    base_y = target.y
    frames: list[FramePair] = []
    gt: list[BBox] = []
    for t in range(spec.n_frames):
        if spec.thermal_crossover > 0 and cross_lo <= t < cross_hi:
            target.heat = 1.0 - spec.thermal_crossover
        else:
            target.heat = 1.0
        if t > 0:
            for sq in squares:
                sq.step()
            if spec.motion == "jump" and t == jump_frame:
                # jump toward the roomier side so the discontinuity keeps its size
                room_down = (h - target.size - target.margin) - target.y
                sign = 1.0 if room_down >= target.y - target.margin else -1.0
                target.y = min(max(target.y + sign * spec.jump_px, target.margin), h - target.size - target.margin)
            elif spec.motion == "sinusoid":
                amp = min(12.0, h / 6.0)
                target.y = np.clip(base_y + amp * np.sin(2 * np.pi * t / 20.0), target.margin, h - target.size - target.margin)
        rgb = bg_rgb.copy()
        thermal = bg_th.copy()
        for sq in squares[1:]:
            sq.paint(rgb, thermal)
        target.paint(rgb, thermal)  # target drawn last: always fully visible
        if spec.noise_sigma > 0:
            rgb = rgb + rng.normal(0.0, spec.noise_sigma, rgb.shape)
            thermal = thermal + rng.normal(0.0, spec.noise_sigma, thermal.shape)
        rgb = np.clip(rgb, 0.0, 1.0)
        thermal = np.clip(thermal, 0.0, 1.0)
        frames.append(FramePair(rgb=Tensor(rgb), thermal=Tensor(thermal[None])))
        gt.append(target.box())

    attrs = [spec.motion] + (["low-illumination"] if low else [])
    if spec.thermal_crossover > 0:
        attrs.append("thermal-crossover")
    if spec.hot_distractors:
        attrs.append("hot-distractors")
    name = f"synth-{spec.motion}-{spec.seed}"
    return SequenceRecord(name=name, frames=frames, gt=gt, attributes=attrs)
