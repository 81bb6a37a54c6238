"""Flat run configuration: every tunable constant, JSON-serializable.

Ablation variants are presets over the three module flags, so a single
binary can run the base model, each intermediate, and the full pipeline.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path

VARIANTS = {
    "v1": {"pgm": False, "fim": False, "drm": False},
    "v2": {"pgm": True, "fim": False, "drm": False},
    "v3": {"pgm": True, "fim": True, "drm": False},
    "full": {"pgm": True, "fim": True, "drm": True},
}


@dataclass
class RunConfig:
    seed: int = 0
    precision: str = "run"  # "test" (float64) or "run" (float32)

    # module flags (variants v1/v2/v3/full preset these)
    pgm: bool = True
    fim: bool = True
    drm: bool = True

    # pixel-level generation / distillation
    pgm_noise_sigma: float = 0.05
    pgm_epochs: int = 200
    pgm_batch: int = 4
    pgm_critic_iters: int = 5
    pgm_lr: float = 1e-2

    # feature interaction
    fim_init_noise: float = 0.01
    fim_shift_fill: str = "zero"  # "zero" or "copy" for the vacated strips

    # candidate sampling
    n_candidates: int = 256
    trans_sigma: float = 0.3  # relative to mean(w, h)
    scale_sigma: float = 0.5  # exponent sigma on scale_base
    scale_base: float = 1.05
    top_k: int = 5

    # sample harvesting gates and counts
    init_pos: int = 500
    init_neg: int = 5000
    update_pos: int = 50
    update_neg: int = 200
    pos_iou: float = 0.7
    neg_iou: float = 0.5

    # classifier head and its online training
    fc_hidden: int = 512
    fc_dropout: float = 0.5
    init_epochs: int = 50
    update_epochs: int = 15
    lr_fc6: float = 1e-4
    lr_fc45: float = 1e-3
    weight_decay: float = 1e-4
    batch_pos: int = 32
    batch_neg: int = 96
    success_threshold: float = 0.5

    # bounding-box regressor (first frame only)
    regressor_samples: int = 1000
    regressor_iou: float = 0.6
    ridge_lambda: float = 1000.0

    # short/long-term update buffers
    long_interval: int = 10
    short_capacity: int = 20
    long_capacity: int = 100

    # decision-level refinement
    pyramid_levels: int = 3
    lk_window: int = 15
    lk_iters: int = 10
    lk_det_eps: float = 1e-6
    max_flow_frac: float = 1.5  # fraction of min(box w, h)
    flow_grid: int = 5

    # offline multi-domain pretraining
    pretrain_lr: float = 1e-4
    pretrain_epochs: int = 200
    pretrain_frames: int = 8
    pretrain_pos: int = 32
    pretrain_neg: int = 96

    # evaluation
    pr_threshold_px: float = 20.0

    def __post_init__(self):
        if self.precision not in ("test", "run"):
            raise ValueError(f"precision must be 'test' or 'run', got {self.precision!r}")
        if self.fim_shift_fill not in ("zero", "copy"):
            raise ValueError(f"fim_shift_fill must be 'zero' or 'copy', got {self.fim_shift_fill!r}")
        if self.top_k < 1 or self.n_candidates < self.top_k:
            raise ValueError("need n_candidates >= top_k >= 1")

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "RunConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    def with_variant(self, name: str) -> "RunConfig":
        if name not in VARIANTS:
            raise ValueError(f"unknown variant {name!r}, expected one of {sorted(VARIANTS)}")
        d = self.to_dict()
        d.update(VARIANTS[name])
        return RunConfig.from_dict(d)

    def variant_name(self) -> str:
        for name, flags in VARIANTS.items():
            if all(getattr(self, k) == v for k, v in flags.items()):
                return name
        return "custom"
