# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled gather/scatter kernels for convolution and RoI pooling.

Convolution keeps the BLAS matmul but replaces the patch gather (im2col) and
the backward scatter (col2im) with C loops; RoI align is fully compiled.
Contracts match ``numpy_kernels`` bit-for-bit conventions.
"""

import numpy as np

cimport cython
cimport numpy as cnp

cnp.import_array()

ctypedef fused floating:
    float
    double


def _out_dim(Py_ssize_t size, Py_ssize_t k, Py_ssize_t stride, Py_ssize_t dilation, Py_ssize_t padding):
    return (size + 2 * padding - dilation * (k - 1) - 1) // stride + 1


# ---------------------------------------------------------------------------
# convolution: compiled im2col/col2im around a BLAS matmul
# ---------------------------------------------------------------------------

cdef _im2col_impl(floating[:, :, :, ::1] x, Py_ssize_t kh, Py_ssize_t kw,
                  int stride, int dilation, int padding):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t ho = _out_dim(h, kh, stride, dilation, padding)
    cdef Py_ssize_t wo = _out_dim(w, kw, stride, dilation, padding)
    cols_arr = np.zeros((n, c * kh * kw, ho * wo), dtype=np.asarray(x).dtype)
    cdef floating[:, :, ::1] cols = cols_arr
    cdef Py_ssize_t bi, ci, ky, kx, oy, ox, iy, ix, row, base
    with nogil:
        for bi in range(n):
            for ci in range(c):
                for ky in range(kh):
                    for kx in range(kw):
                        row = (ci * kh + ky) * kw + kx
                        for oy in range(ho):
                            iy = oy * stride - padding + ky * dilation
                            if iy < 0 or iy >= h:
                                continue
                            base = oy * wo
                            for ox in range(wo):
                                ix = ox * stride - padding + kx * dilation
                                if 0 <= ix < w:
                                    cols[bi, row, base + ox] = x[bi, ci, iy, ix]
    return cols_arr, ho, wo


cdef _col2im_impl(floating[:, :, ::1] gcols, Py_ssize_t c, Py_ssize_t h, Py_ssize_t w,
                  Py_ssize_t kh, Py_ssize_t kw, Py_ssize_t ho, Py_ssize_t wo,
                  int stride, int dilation, int padding):
    cdef Py_ssize_t n = gcols.shape[0]
    gx_arr = np.zeros((n, c, h, w), dtype=np.asarray(gcols).dtype)
    cdef floating[:, :, :, ::1] gx = gx_arr
    cdef Py_ssize_t bi, ci, ky, kx, oy, ox, iy, ix, row, base
    with nogil:
        for bi in range(n):
            for ci in range(c):
                for ky in range(kh):
                    for kx in range(kw):
                        row = (ci * kh + ky) * kw + kx
                        for oy in range(ho):
                            iy = oy * stride - padding + ky * dilation
                            if iy < 0 or iy >= h:
                                continue
                            base = oy * wo
                            for ox in range(wo):
                                ix = ox * stride - padding + kx * dilation
                                if 0 <= ix < w:
                                    gx[bi, ci, iy, ix] += gcols[bi, row, base + ox]
    return gx_arr


def _im2col(x, kh, kw, stride, dilation, padding):
    if x.dtype == np.float32:
        return _im2col_impl[float](x, kh, kw, stride, dilation, padding)
    return _im2col_impl[double](x, kh, kw, stride, dilation, padding)


def conv2d_forward(x, w, int stride, int dilation, int padding):
    k = w.shape[0]
    cols, ho, wo = _im2col(x, w.shape[2], w.shape[3], stride, dilation, padding)
    out = np.matmul(w.reshape(k, -1)[None], cols)
    return np.ascontiguousarray(out.reshape(x.shape[0], k, ho, wo))


def conv2d_backward_weight(grad_out, x, w_shape, int stride, int dilation, int padding):
    k = w_shape[0]
    cols, ho, wo = _im2col(x, w_shape[2], w_shape[3], stride, dilation, padding)
    g = grad_out.reshape(x.shape[0], k, ho * wo)
    gw = np.matmul(g, cols.transpose(0, 2, 1)).sum(axis=0)
    return np.ascontiguousarray(gw.reshape(w_shape))


def conv2d_backward_input(grad_out, w, x_shape, int stride, int dilation, int padding):
    k = w.shape[0]
    n, c, h, wi = x_shape
    ho, wo = grad_out.shape[2], grad_out.shape[3]
    gcols = np.ascontiguousarray(np.matmul(w.reshape(k, -1).T[None], grad_out.reshape(n, k, ho * wo)))
    if gcols.dtype == np.float32:
        return _col2im_impl[float](gcols, c, h, wi, w.shape[2], w.shape[3], ho, wo, stride, dilation, padding)
    return _col2im_impl[double](gcols, c, h, wi, w.shape[2], w.shape[3], ho, wo, stride, dilation, padding)


# ---------------------------------------------------------------------------
# RoI align
# ---------------------------------------------------------------------------

def roi_align_forward(cnp.ndarray feat, cnp.ndarray boxes, int out_size, int samples):
    if feat.dtype == np.float32:
        return _roi_align_forward[float](feat, boxes.astype(np.float32, copy=False), out_size, samples)
    return _roi_align_forward[double](feat, boxes.astype(np.float64, copy=False), out_size, samples)


def roi_align_backward(cnp.ndarray grad_out, cnp.ndarray boxes, feat_shape, int out_size, int samples):
    if grad_out.dtype == np.float32:
        return _roi_align_backward[float](grad_out, boxes.astype(np.float32, copy=False), feat_shape, out_size, samples)
    return _roi_align_backward[double](grad_out, boxes.astype(np.float64, copy=False), feat_shape, out_size, samples)


cdef inline void _sample_coords(floating coord, Py_ssize_t limit, Py_ssize_t* i0, floating* frac) noexcept nogil:
    if coord < 0:
        coord = 0
    if coord > limit - 1:
        coord = <floating>(limit - 1)
    if limit == 1:
        i0[0] = 0
        frac[0] = 0
        return
    i0[0] = <Py_ssize_t>coord
    if i0[0] > limit - 2:
        i0[0] = limit - 2
    frac[0] = coord - <floating>i0[0]


cdef _roi_align_forward(floating[:, :, ::1] feat, floating[:, ::1] boxes, int out_size, int samples):
    cdef Py_ssize_t c = feat.shape[0], h = feat.shape[1], w = feat.shape[2]
    cdef Py_ssize_t n = boxes.shape[0]
    out_arr = np.zeros((n, c, out_size, out_size), dtype=np.asarray(feat).dtype)
    cdef floating[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t bi, ci, oy, ox, sy, sx, y0, x0, y1, x1
    cdef floating by, bx, bh, bw, yy, xx, wy, wx, denom, w00, w01, w10, w11
    denom = <floating>(samples * samples)
    with nogil:
        for bi in range(n):
            bx = boxes[bi, 0]
            by = boxes[bi, 1]
            bw = boxes[bi, 2]
            bh = boxes[bi, 3]
            for oy in range(out_size):
                for ox in range(out_size):
                    for sy in range(samples):
                        yy = by + bh * (oy + (sy + <floating>0.5) / samples) / out_size
                        for sx in range(samples):
                            xx = bx + bw * (ox + (sx + <floating>0.5) / samples) / out_size
                            _sample_coords(yy, h, &y0, &wy)
                            _sample_coords(xx, w, &x0, &wx)
                            y1 = y0 + (1 if h > 1 else 0)
                            x1 = x0 + (1 if w > 1 else 0)
                            w00 = (1 - wy) * (1 - wx) / denom
                            w01 = (1 - wy) * wx / denom
                            w10 = wy * (1 - wx) / denom
                            w11 = wy * wx / denom
                            for ci in range(c):
                                out[bi, ci, oy, ox] += (
                                    feat[ci, y0, x0] * w00
                                    + feat[ci, y0, x1] * w01
                                    + feat[ci, y1, x0] * w10
                                    + feat[ci, y1, x1] * w11
                                )
    return out_arr


cdef _roi_align_backward(floating[:, :, :, ::1] grad_out, floating[:, ::1] boxes,
                         feat_shape, int out_size, int samples):
    cdef Py_ssize_t c = feat_shape[0], h = feat_shape[1], w = feat_shape[2]
    cdef Py_ssize_t n = boxes.shape[0]
    gf_arr = np.zeros((c, h, w), dtype=np.asarray(grad_out).dtype)
    cdef floating[:, :, ::1] gf = gf_arr
    cdef Py_ssize_t bi, ci, oy, ox, sy, sx, y0, x0, y1, x1
    cdef floating by, bx, bh, bw, yy, xx, wy, wx, g, denom, w00, w01, w10, w11
    denom = <floating>(samples * samples)
    with nogil:
        for bi in range(n):
            bx = boxes[bi, 0]
            by = boxes[bi, 1]
            bw = boxes[bi, 2]
            bh = boxes[bi, 3]
            for oy in range(out_size):
                for ox in range(out_size):
                    for sy in range(samples):
                        yy = by + bh * (oy + (sy + <floating>0.5) / samples) / out_size
                        for sx in range(samples):
                            xx = bx + bw * (ox + (sx + <floating>0.5) / samples) / out_size
                            _sample_coords(yy, h, &y0, &wy)
                            _sample_coords(xx, w, &x0, &wx)
                            y1 = y0 + (1 if h > 1 else 0)
                            x1 = x0 + (1 if w > 1 else 0)
                            w00 = (1 - wy) * (1 - wx) / denom
                            w01 = (1 - wy) * wx / denom
                            w10 = wy * (1 - wx) / denom
                            w11 = wy * wx / denom
                            for ci in range(c):
                                g = grad_out[bi, ci, oy, ox]
                                gf[ci, y0, x0] += g * w00
                                gf[ci, y0, x1] += g * w01
                                gf[ci, y1, x0] += g * w10
                                gf[ci, y1, x1] += g * w11
    return gf_arr
