"""Feature-level interaction: channel-sliced spatial shifts + cross-modal
attention.

The shift operator splits the channel axis into four equal slices and moves
each by exactly one pixel in its assigned direction, zero-filling the vacated
strip.  The attention block projects each shifted modality to query/key/value
tokens, crosses them both ways, sums the two attended maps, and concatenates
the result with the X-modality features to twice the channel count.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .backbone import DeepFeatures

# (dy, dx) per channel slice; +x means content moves one pixel rightward
SHIFT_SETS = {
    "rgb": ((0, 1), (0, -1), (1, 0), (-1, 0)),
    "thermal": ((1, 0), (-1, 0), (0, 1), (0, -1)),
}
ATTENTION_DK = 1.0  # scaling factor under the square root


def _shift2d(plane_stack: np.ndarray, dy: int, dx: int, fill_copy: bool) -> np.ndarray:
    """Shift [c,H,W] content by (dy,dx); vacated strip zero or source copy."""
    out = plane_stack.copy() if fill_copy else np.zeros_like(plane_stack)
    h, w = plane_stack.shape[1:]
    ys_d = slice(max(dy, 0), h + min(dy, 0))
    ys_s = slice(max(-dy, 0), h + min(-dy, 0))
    xs_d = slice(max(dx, 0), w + min(dx, 0))
    xs_s = slice(max(-dx, 0), w + min(-dx, 0))
    out[:, ys_d, xs_d] = plane_stack[:, ys_s, xs_s]
    return out


def sfts_shift(d: T.Tensor, direction_set="rgb", fill: str = "zero") -> T.Tensor:
    """Slice channels in four and displace each slice one pixel.

    ``direction_set`` is "rgb"/"thermal" or an explicit 4-tuple of (dy,dx).
    """
    directions = SHIFT_SETS.get(direction_set, direction_set)
    if len(directions) != 4:
        raise ValueError(f"need exactly 4 shift directions, got {directions!r}")
    if fill not in ("zero", "copy"):
        raise ValueError(f"fill must be 'zero' or 'copy', got {fill!r}")
    c = d.shape[0]
    if d.ndim != 3 or c % 4 != 0:
        raise ValueError(f"sfts needs [C,H,W] with C divisible by 4, got {d.shape}")
    if d.shape[1] < 2 or d.shape[2] < 2:
        raise ValueError(f"sfts needs H,W >= 2, got {d.shape}")
    q = c // 4
    fill_copy = fill == "copy"
    out = np.empty_like(d.data)
    for s, (dy, dx) in enumerate(directions):
        out[s * q : (s + 1) * q] = _shift2d(d.data[s * q : (s + 1) * q], dy, dx, fill_copy)

    def bw(g):
        gx = np.empty_like(g)
        h, w = g.shape[1:]
        for s, (dy, dx) in enumerate(directions):
            sl = slice(s * q, (s + 1) * q)
            back = _shift2d(g[sl], -dy, -dx, False)
            if fill_copy:
                # the vacated strip passed the source through unchanged
                ys = slice(max(dy, 0), h + min(dy, 0))
                xs = slice(max(dx, 0), w + min(dx, 0))
                keep = np.ones((h, w), dtype=bool)
                keep[ys, xs] = False
                back = back + g[sl] * keep
            gx[sl] = back
        return (gx,)

    return T.make_op(out, (d,), bw, "sfts_shift")


@dataclass
class AttentionMaps:
    d_rgb_t: T.Tensor  # thermal queries attending over rgb keys/values
    d_t_rgb: T.Tensor
    att_rgbt: T.Tensor  # sum of the two
    d_f: T.Tensor  # concat(d_x, att) -> [2C,H,W]


def init_fim_params(channels: int, seed: int = 0, init_noise: float = 0.01) -> dict[str, T.Tensor]:
    """Per-modality q/k/v projections, near-identity at init."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xF1A]))
    params = {}
    for mod in ("rgb", "t"):
        for name in ("q", "k", "v"):
            params[f"fim.{mod}.{name}.w"] = T.Tensor(
                np.eye(channels) + init_noise * rng.standard_normal((channels, channels)),
                requires_grad=True,
            )
            params[f"fim.{mod}.{name}.b"] = T.Tensor(np.zeros(channels), requires_grad=True)
    return params


def _to_tokens(d: T.Tensor) -> T.Tensor:
    """[C,H,W] -> [HW,C], row-major over (H,W)."""
    c, h, w = d.shape
    return T.reshape(T.transpose(d, (1, 2, 0)), (h * w, c))


def _to_map(tokens: T.Tensor, h: int, w: int) -> T.Tensor:
    hw, c = tokens.shape
    return T.transpose(T.reshape(tokens, (h, w, c)), (2, 0, 1))


def _project(tokens: T.Tensor, params, mod: str, name: str) -> T.Tensor:
    return T.linear(tokens, params[f"fim.{mod}.{name}.w"], params[f"fim.{mod}.{name}.b"])


def _attend(q: T.Tensor, k: T.Tensor, v: T.Tensor) -> T.Tensor:
    scores = T.scale(T.matmul(q, T.transpose(k)), 1.0 / np.sqrt(ATTENTION_DK))
    return T.matmul(T.softmax(scores, axis=-1), v)


def mfit_attention(d_rgb_s: T.Tensor, d_t_s: T.Tensor, d_x: T.Tensor, params) -> AttentionMaps:
    if not (d_rgb_s.shape == d_t_s.shape == d_x.shape):
        raise ValueError(
            f"attention inputs must share a shape, got {d_rgb_s.shape}, {d_t_s.shape}, {d_x.shape}"
        )
    c, h, w = d_rgb_s.shape
    tok_rgb = _to_tokens(d_rgb_s)
    tok_t = _to_tokens(d_t_s)
    d_rgb_t = _attend(
        _project(tok_t, params, "t", "q"),
        _project(tok_rgb, params, "rgb", "k"),
        _project(tok_rgb, params, "rgb", "v"),
    )
    d_t_rgb = _attend(
        _project(tok_rgb, params, "rgb", "q"),
        _project(tok_t, params, "t", "k"),
        _project(tok_t, params, "t", "v"),
    )
    map_rgb_t = _to_map(d_rgb_t, h, w)
    map_t_rgb = _to_map(d_t_rgb, h, w)
    att = T.add(map_rgb_t, map_t_rgb)
    d_f = T.concat([d_x, att], axis=0)
    return AttentionMaps(d_rgb_t=map_rgb_t, d_t_rgb=map_t_rgb, att_rgbt=att, d_f=d_f)


def fim_forward(feats: DeepFeatures, params, enabled: bool = True, fill: str = "zero"):
    """Returns (d_f [2C,H,W], AttentionMaps or None).

    Disabled: the fallback path concatenates the X features with the plain
    element-wise sum of the rgb/thermal features.
    """
    if not enabled:
        return T.concat([feats.d_x, T.add(feats.d_rgb, feats.d_t)], axis=0), None
    d_rgb_s = sfts_shift(feats.d_rgb, "rgb", fill=fill)
    d_t_s = sfts_shift(feats.d_t, "thermal", fill=fill)
    maps = mfit_attention(d_rgb_s, d_t_s, feats.d_x, params)
    return maps.d_f, maps
