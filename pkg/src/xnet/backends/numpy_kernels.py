"""Pure-numpy implementations of the spatial hot kernels.

Convolution goes through an ``as_strided`` im2col view plus one BLAS matmul;
the input gradient reuses the same path with a spatially flipped kernel when
stride is 1, and falls back to an explicit col2im scatter otherwise.
"""

import numpy as np
from numpy.lib.stride_tricks import as_strided


def _out_dim(size, k, stride, dilation, padding):
    return (size + 2 * padding - dilation * (k - 1) - 1) // stride + 1


def _im2col(x, kh, kw, stride, dilation, padding):
    n, c, h, w = x.shape
    ho = _out_dim(h, kh, stride, dilation, padding)
    wo = _out_dim(w, kw, stride, dilation, padding)
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    sn, sc, sh, sw = x.strides
    view = as_strided(
        x,
        shape=(n, c, kh, kw, ho, wo),
        strides=(sn, sc, sh * dilation, sw * dilation, sh * stride, sw * stride),
    )
    return np.ascontiguousarray(view).reshape(n, c * kh * kw, ho * wo), ho, wo


def conv2d_forward(x, w, stride, dilation, padding):
    k = w.shape[0]
    cols, ho, wo = _im2col(x, w.shape[2], w.shape[3], stride, dilation, padding)
    out = np.matmul(w.reshape(k, -1)[None], cols)
    return np.ascontiguousarray(out.reshape(x.shape[0], k, ho, wo))


def conv2d_backward_weight(grad_out, x, w_shape, stride, dilation, padding):
    k, c, kh, kw = w_shape
    cols, ho, wo = _im2col(x, kh, kw, stride, dilation, padding)
    g = grad_out.reshape(x.shape[0], k, ho * wo)
    gw = np.matmul(g, cols.transpose(0, 2, 1)).sum(axis=0)
    return np.ascontiguousarray(gw.reshape(w_shape))


def conv2d_backward_input(grad_out, w, x_shape, stride, dilation, padding):
    k, c, kh, kw = w.shape
    if stride == 1:
        # transposed conv == conv with flipped kernel and swapped channel axes
        w_flip = np.ascontiguousarray(w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
        pad_h = dilation * (kh - 1) - padding
        if pad_h >= 0 and kh == kw:
            return conv2d_forward(grad_out, w_flip, 1, dilation, pad_h)
    return _col2im_scatter(grad_out, w, x_shape, stride, dilation, padding)


def _col2im_scatter(grad_out, w, x_shape, stride, dilation, padding):
    n, c, h, w_in = x_shape
    k, _, kh, kw = w.shape
    _, _, ho, wo = grad_out.shape
    # grad wrt columns, then scatter-add each patch position back
    g = grad_out.reshape(n, k, ho * wo)
    gcols = np.matmul(w.reshape(k, -1).T[None], g)  # [n, c*kh*kw, ho*wo]
    gcols = gcols.reshape(n, c, kh, kw, ho, wo)
    gx = np.zeros((n, c, h + 2 * padding, w_in + 2 * padding), dtype=grad_out.dtype)
    oy = np.arange(ho) * stride
    ox = np.arange(wo) * stride
    for i in range(kh):
        for j in range(kw):
            gx[:, :, oy[:, None] + i * dilation, ox[None, :] + j * dilation] += gcols[:, :, i, j]
    if padding:
        gx = gx[:, :, padding:-padding, padding:-padding]
    return np.ascontiguousarray(gx)


def _bilinear_setup(feat_shape, boxes, out_size, samples):
    _, h, w = feat_shape
    n = boxes.shape[0]
    frac = (np.arange(samples) + 0.5) / samples
    gy = (np.arange(out_size)[:, None] + frac[None, :]).reshape(-1) / out_size  # [out*samples]
    ys = boxes[:, 1][:, None] + boxes[:, 3][:, None] * gy[None, :]
    xs = boxes[:, 0][:, None] + boxes[:, 2][:, None] * gy[None, :]
    ys = np.clip(ys, 0.0, h - 1.0)
    xs = np.clip(xs, 0.0, w - 1.0)
    y0 = np.clip(np.floor(ys).astype(np.intp), 0, h - 2) if h > 1 else np.zeros_like(ys, dtype=np.intp)
    x0 = np.clip(np.floor(xs).astype(np.intp), 0, w - 2) if w > 1 else np.zeros_like(xs, dtype=np.intp)
    wy = ys - y0
    wx = xs - x0
    if h == 1:
        wy = np.zeros_like(wy)
    if w == 1:
        wx = np.zeros_like(wx)
    return n, y0, x0, wy, wx


def roi_align_forward(feat, boxes, out_size, samples):
    c, h, w = feat.shape
    n, y0, x0, wy, wx = _bilinear_setup(feat.shape, boxes, out_size, samples)
    m = out_size * samples
    # gather the 4 corners for every (box, grid-y, grid-x) sample point
    yy0 = np.broadcast_to(y0[:, :, None], (n, m, m))
    xx0 = np.broadcast_to(x0[:, None, :], (n, m, m))
    wyy = np.broadcast_to(wy[:, :, None], (n, m, m))
    wxx = np.broadcast_to(wx[:, None, :], (n, m, m))
    v00 = feat[:, yy0, xx0]
    v01 = feat[:, yy0, xx0 + (1 if w > 1 else 0)]
    v10 = feat[:, yy0 + (1 if h > 1 else 0), xx0]
    v11 = feat[:, yy0 + (1 if h > 1 else 0), xx0 + (1 if w > 1 else 0)]
    vals = (
        v00 * (1 - wyy) * (1 - wxx)
        + v01 * (1 - wyy) * wxx
        + v10 * wyy * (1 - wxx)
        + v11 * wyy * wxx
    )  # [c, n, m, m]
    vals = vals.reshape(c, n, out_size, samples, out_size, samples)
    out = vals.mean(axis=(3, 5)).transpose(1, 0, 2, 3)
    return np.ascontiguousarray(out)


def roi_align_backward(grad_out, boxes, feat_shape, out_size, samples):
    c, h, w = feat_shape
    n, y0, x0, wy, wx = _bilinear_setup(feat_shape, boxes, out_size, samples)
    m = out_size * samples
    yy0 = np.broadcast_to(y0[:, :, None], (n, m, m)).reshape(-1)
    xx0 = np.broadcast_to(x0[:, None, :], (n, m, m)).reshape(-1)
    wyy = np.broadcast_to(wy[:, :, None], (n, m, m)).reshape(-1)
    wxx = np.broadcast_to(wx[:, None, :], (n, m, m)).reshape(-1)
    # each sample contributes grad/(samples^2) of its bin's output cell
    g = grad_out.transpose(1, 0, 2, 3)  # [c, n, out, out]
    g = np.repeat(np.repeat(g, samples, axis=2), samples, axis=3) / (samples * samples)
    g = g.reshape(c, -1)  # [c, n*m*m]
    dy = 1 if h > 1 else 0
    dx = 1 if w > 1 else 0
    gf = np.zeros((c, h * w), dtype=grad_out.dtype)
    for yy, xx, ww in (
        (yy0, xx0, (1 - wyy) * (1 - wxx)),
        (yy0, xx0 + dx, (1 - wyy) * wxx),
        (yy0 + dy, xx0, wyy * (1 - wxx)),
        (yy0 + dy, xx0 + dx, wyy * wxx),
    ):
        np.add.at(gf.T, yy * w + xx, (g * ww[None, :]).T)
    return gf.reshape(c, h, w)
