"""Plain-numpy image helpers shared by the fusion teacher, flow and data code."""

import numpy as np

# Rec.601 luminance weights
_LUMA = np.array([0.299, 0.587, 0.114])


def luma(rgb: np.ndarray) -> np.ndarray:
    """[3,H,W] -> [H,W] luminance."""
    return np.tensordot(_LUMA, rgb, axes=1)


def replace_luma(rgb: np.ndarray, new_y: np.ndarray) -> np.ndarray:
    """Shift all channels by the luminance delta, preserving chroma offsets.

    Exact: luma(result) == new_y wherever no clamping bites.
    """
    delta = new_y - luma(rgb)
    return np.clip(rgb + delta[None], 0.0, 1.0)


def grad_mag(img: np.ndarray) -> np.ndarray:
    """Central-difference gradient magnitude of a [H,W] image."""
    gy, gx = np.gradient(img)
    return np.hypot(gy, gx)


def blur5(img: np.ndarray) -> np.ndarray:
    """Separable 5-tap binomial blur with replicated borders."""
    k = np.array([1.0, 4.0, 6.0, 4.0, 1.0]) / 16.0
    padded = np.pad(img, ((2, 2), (0, 0)), mode="edge")
    out = sum(k[i] * padded[i : i + img.shape[0]] for i in range(5))
    padded = np.pad(out, ((0, 0), (2, 2)), mode="edge")
    return sum(k[i] * padded[:, i : i + img.shape[1]] for i in range(5))


def downsample2(img: np.ndarray) -> np.ndarray:
    """Every second pixel; output dims are ceil(input/2)."""
    return np.ascontiguousarray(img[::2, ::2])


def bilinear_sample(img: np.ndarray, ys: np.ndarray, xs: np.ndarray) -> np.ndarray:
    """Sample [H,W] image at float coords with border clamping."""
    h, w = img.shape
    ys = np.clip(ys, 0.0, h - 1.0)
    xs = np.clip(xs, 0.0, w - 1.0)
    y0 = np.clip(np.floor(ys).astype(np.intp), 0, max(h - 2, 0))
    x0 = np.clip(np.floor(xs).astype(np.intp), 0, max(w - 2, 0))
    wy = ys - y0
    wx = xs - x0
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    return (
        img[y0, x0] * (1 - wy) * (1 - wx)
        + img[y0, x1] * (1 - wy) * wx
        + img[y1, x0] * wy * (1 - wx)
        + img[y1, x1] * wy * wx
    )


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
