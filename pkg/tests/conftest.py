"""Shared oracles: brute-force references the fast paths are checked against."""

import numpy as np
import pytest

from xnet import tensor as T


@pytest.fixture(autouse=True)
def _test_precision():
    T.set_mode("test")
    yield
    T.set_mode("test")


def conv2d_loops(x, w, b=None, stride=1, dilation=1, padding=0):
    """Direct nested-loop dilated cross-correlation."""
    n, c, h, wi = x.shape
    k, _, kh, kw = w.shape
    ho = (h + 2 * padding - dilation * (kh - 1) - 1) // stride + 1
    wo = (wi + 2 * padding - dilation * (kw - 1) - 1) // stride + 1
    out = np.zeros((n, k, ho, wo), dtype=x.dtype)
    for bi in range(n):
        for ki in range(k):
            for oy in range(ho):
                for ox in range(wo):
                    acc = 0.0
                    for ci in range(c):
                        for ky in range(kh):
                            for kx in range(kw):
                                iy = oy * stride - padding + ky * dilation
                                ix = ox * stride - padding + kx * dilation
                                if 0 <= iy < h and 0 <= ix < wi:
                                    acc += x[bi, ci, iy, ix] * w[ki, ci, ky, kx]
                    out[bi, ki, oy, ox] = acc + (b[ki] if b is not None else 0.0)
    return out


def matmul_loops(a, b):
    m, k = a.shape
    k2, n = b.shape
    out = np.zeros((m, n), dtype=a.dtype)
    for i in range(m):
        for j in range(n):
            acc = 0.0
            for l in range(k):
                acc += a[i, l] * b[l, j]
            out[i, j] = acc
    return out


def softmax_loops(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    flat = x.reshape(-1, x.shape[-1])
    oflat = out.reshape(-1, x.shape[-1])
    for i in range(flat.shape[0]):
        e = np.exp(flat[i] - flat[i].max())
        oflat[i] = e / e.sum()
    return out


def _bilinear_at(feat, y, x):
    c, h, w = feat.shape
    y = min(max(y, 0.0), h - 1.0)
    x = min(max(x, 0.0), w - 1.0)
    y0 = min(int(np.floor(y)), h - 2) if h > 1 else 0
    x0 = min(int(np.floor(x)), w - 2) if w > 1 else 0
    wy = y - y0 if h > 1 else 0.0
    wx = x - x0 if w > 1 else 0.0
    y1 = y0 + 1 if h > 1 else y0
    x1 = x0 + 1 if w > 1 else x0
    return (
        feat[:, y0, x0] * (1 - wy) * (1 - wx)
        + feat[:, y0, x1] * (1 - wy) * wx
        + feat[:, y1, x0] * wy * (1 - wx)
        + feat[:, y1, x1] * wy * wx
    )


def roi_align_loops(feat, boxes, out_size=3, samples=2):
    """Per-sample bilinear pooling reference."""
    c = feat.shape[0]
    n = boxes.shape[0]
    out = np.zeros((n, c, out_size, out_size), dtype=feat.dtype)
    for bi in range(n):
        bx, by, bw, bh = boxes[bi]
        for oy in range(out_size):
            for ox in range(out_size):
                acc = np.zeros(c, dtype=feat.dtype)
                for sy in range(samples):
                    for sx in range(samples):
                        yy = by + bh * (oy + (sy + 0.5) / samples) / out_size
                        xx = bx + bw * (ox + (sx + 0.5) / samples) / out_size
                        acc += _bilinear_at(feat, yy, xx)
                out[bi, :, oy, ox] = acc / (samples * samples)
    return out


def numeric_grad(f, arrays, index, h=1e-5):
    """Central finite differences of scalar f wrt arrays[index]."""
    base = [a.copy() for a in arrays]
    target = base[index]
    grad = np.zeros_like(target)
    flat = target.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = f(*base)
        flat[i] = orig - h
        down = f(*base)
        flat[i] = orig
        gflat[i] = (up - down) / (2 * h)
    return grad


def check_grads(build, arrays, rel_tol=1e-4, h=1e-5):
    """Compare autodiff grads to central differences.

    ``build(*tensors) -> scalar Tensor``.  Error measure per tensor:
    max |g_ad - g_fd| / max(1, max|g_fd|), i.e. relative to the gradient
    scale with an absolute floor for near-zero gradients.
    """
    tensors = [T.Tensor(a, requires_grad=True) for a in arrays]
    loss = build(*tensors)
    T.backward(loss)

    def scalar(*arrs):
        ts = [T.Tensor(a) for a in arrs]
        return build(*ts).item()

    worst = 0.0
    for i, t in enumerate(tensors):
        assert t.grad is not None, f"missing grad on input {i}"
        fd = numeric_grad(scalar, [a.copy() for a in arrays], i, h=h)
        denom = max(1.0, float(np.abs(fd).max()))
        err = float(np.abs(t.grad - fd).max()) / denom
        worst = max(worst, err)
        assert err < rel_tol, f"gradient mismatch on input {i}: rel err {err:.3e}"
    return worst
