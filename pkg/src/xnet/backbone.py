"""Shared feature extractor: three dilated conv stages at desk-scale widths.

Each modality stream (RGB, thermal, X) runs the same architecture with its
own parameter set; thermal images are replicated to 3 channels first.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T

WIDTHS = (32, 64, 96)
DILATIONS = (1, 2, 3)
MIN_IMAGE_SIDE = 32
FEATURE_STRIDE = 2  # one 2x2 max-pool after stage 1


@dataclass
class DeepFeatures:
    """Per-modality feature maps, all [C,H,W] with C divisible by 4."""

    d_rgb: T.Tensor
    d_t: T.Tensor
    d_x: T.Tensor

    def __post_init__(self):
        if not (self.d_rgb.shape == self.d_t.shape == self.d_x.shape):
            raise ValueError(
                f"modality features must share a shape, got {self.d_rgb.shape}, {self.d_t.shape}, {self.d_x.shape}"
            )
        if self.d_rgb.shape[0] % 4 != 0:
            raise ValueError(f"channel count {self.d_rgb.shape[0]} must be divisible by 4")


def _he(rng, shape):
    fan_in = int(np.prod(shape[1:]))
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), shape)


def init_backbone(seed: int = 0, prefix: str = "backbone") -> dict[str, T.Tensor]:
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xB0B0]))
    c1, c2, c3 = WIDTHS
    raw = {
        f"{prefix}.0.w": _he(rng, (c1, 3, 3, 3)),
        f"{prefix}.0.b": np.zeros(c1),
        f"{prefix}.1.w": _he(rng, (c2, c1, 3, 3)),
        f"{prefix}.1.b": np.zeros(c2),
        f"{prefix}.2.w": _he(rng, (c3, c2, 3, 3)),
        f"{prefix}.2.b": np.zeros(c3),
    }
    return {k: T.Tensor(v, requires_grad=True) for k, v in raw.items()}


def _check_image(image: T.Tensor) -> None:
    if image.ndim != 3 or image.shape[0] != 3:
        raise ValueError(f"expected image [3,h,w], got {image.shape}")
    if image.shape[1] < MIN_IMAGE_SIDE or image.shape[2] < MIN_IMAGE_SIDE:
        raise ValueError(
            f"image {image.shape[1]}x{image.shape[2]} is smaller than the receptive field "
            f"(needs at least {MIN_IMAGE_SIDE}x{MIN_IMAGE_SIDE})"
        )


def stage1_features(image: T.Tensor, params: dict, prefix: str = "backbone") -> T.Tensor:
    """Pre-pool stage-1 activations (used by the equivariance checks)."""
    _check_image(image)
    x = T.reshape(image, (1, *image.shape))
    return T.relu(T.conv2d(x, params[f"{prefix}.0.w"], params[f"{prefix}.0.b"], dilation=DILATIONS[0], padding=DILATIONS[0]))


def extract(image: T.Tensor, params: dict, prefix: str = "backbone") -> T.Tensor:
    """[3,h,w] image in [0,1] -> [C,h/2,w/2] features."""
    h = stage1_features(image, params, prefix)
    h = T.max_pool2d(h, 2)
    h = T.relu(T.conv2d(h, params[f"{prefix}.1.w"], params[f"{prefix}.1.b"], dilation=DILATIONS[1], padding=DILATIONS[1]))
    h = T.relu(T.conv2d(h, params[f"{prefix}.2.w"], params[f"{prefix}.2.b"], dilation=DILATIONS[2], padding=DILATIONS[2]))
    return T.reshape(h, h.shape[1:])


def thermal_to_3ch(thermal: T.Tensor) -> T.Tensor:
    """Replicate a [1,H,W] thermal image to the 3-channel input layout."""
    return T.concat([thermal, thermal, thermal], axis=0)
