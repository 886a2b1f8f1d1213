"""Pure-numpy kernels for convolution and 3x3 pooling.

This is the fallback backend (``MASKEDNAS_BACKEND=numpy``). Convolutions
use the shifted-slice formulation: one vectorised accumulation per kernel
tap, which is exactly the sliding-window sum without im2col buffers.
All kernels take and return C-contiguous float64 arrays.
"""

import numpy as np


def conv2d_out_hw(h, w, kh, kw, stride, pad, dilation):
    oh = (h + 2 * pad - dilation * (kh - 1) - 1) // stride + 1
    ow = (w + 2 * pad - dilation * (kw - 1) - 1) // stride + 1
    return oh, ow


def _pad(x, pad):
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))


def conv2d_forward(x, w, stride, pad, dilation, groups):
    n, cin, h, wid = x.shape
    cout, cg, kh, kw = w.shape
    oh, ow = conv2d_out_hw(h, wid, kh, kw, stride, pad, dilation)
    xp = _pad(x, pad)
    out = np.zeros((n, cout, oh, ow))
    co_g = cout // groups
    for g in range(groups):
        xg = xp[:, g * cg:(g + 1) * cg]
        wg = w[g * co_g:(g + 1) * co_g]
        acc = out[:, g * co_g:(g + 1) * co_g]
        for i in range(kh):
            hi = i * dilation
            for j in range(kw):
                wj = j * dilation
                xs = xg[:, :, hi:hi + stride * oh:stride, wj:wj + stride * ow:stride]
                acc += np.einsum('nchw,oc->nohw', xs, wg[:, :, i, j], optimize=True)
    return out


def conv2d_backward_input(gout, w, x_shape, stride, pad, dilation, groups):
    n, cin, h, wid = x_shape
    cout, cg, kh, kw = w.shape
    oh, ow = gout.shape[2], gout.shape[3]
    dxp = np.zeros((n, cin, h + 2 * pad, wid + 2 * pad))
    co_g = cout // groups
    for g in range(groups):
        gg = gout[:, g * co_g:(g + 1) * co_g]
        wg = w[g * co_g:(g + 1) * co_g]
        dxg = dxp[:, g * cg:(g + 1) * cg]
        for i in range(kh):
            hi = i * dilation
            for j in range(kw):
                wj = j * dilation
                dxg[:, :, hi:hi + stride * oh:stride, wj:wj + stride * ow:stride] += \
                    np.einsum('nohw,oc->nchw', gg, wg[:, :, i, j], optimize=True)
    if pad:
        return np.ascontiguousarray(dxp[:, :, pad:pad + h, pad:pad + wid])
    return dxp


def conv2d_backward_weight(gout, x, w_shape, stride, pad, dilation, groups):
    cout, cg, kh, kw = w_shape
    oh, ow = gout.shape[2], gout.shape[3]
    xp = _pad(x, pad)
    dw = np.zeros(w_shape)
    co_g = cout // groups
    for g in range(groups):
        gg = gout[:, g * co_g:(g + 1) * co_g]
        xg = xp[:, g * cg:(g + 1) * cg]
        for i in range(kh):
            hi = i * dilation
            for j in range(kw):
                wj = j * dilation
                xs = xg[:, :, hi:hi + stride * oh:stride, wj:wj + stride * ow:stride]
                dw[g * co_g:(g + 1) * co_g, :, i, j] = \
                    np.einsum('nohw,nchw->oc', gg, xs, optimize=True)
    return dw


def _pool_out_hw(h, w, stride):
    # 3x3 window, pad 1
    oh = (h + 2 - 3) // stride + 1
    ow = (w + 2 - 3) // stride + 1
    return oh, ow


def avgpool3_count_map(h, w, stride):
    """Number of in-bounds cells under each 3x3 window (count_include_pad=False)."""
    oh, ow = _pool_out_hw(h, w, stride)
    ones = np.ones((1, 1, h, w))
    cnt = np.zeros((1, 1, oh, ow))
    op = _pad(ones, 1)
    for i in range(3):
        for j in range(3):
            cnt += op[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride]
    return cnt[0, 0]


def avgpool3_forward(x, stride):
    n, c, h, w = x.shape
    oh, ow = _pool_out_hw(h, w, stride)
    xp = _pad(x, 1)
    out = np.zeros((n, c, oh, ow))
    for i in range(3):
        for j in range(3):
            out += xp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride]
    return out / avgpool3_count_map(h, w, stride)


def avgpool3_backward(gout, x_shape, stride):
    n, c, h, w = x_shape
    oh, ow = gout.shape[2], gout.shape[3]
    g = gout / avgpool3_count_map(h, w, stride)
    dxp = np.zeros((n, c, h + 2, w + 2))
    for i in range(3):
        for j in range(3):
            dxp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += g
    return np.ascontiguousarray(dxp[:, :, 1:1 + h, 1:1 + w])


def maxpool3_forward(x, stride):
    """Returns (out, argmax) with argmax the flat 3x3 window index of the
    first maximal in-bounds cell in scan order."""
    n, c, h, w = x.shape
    oh, ow = _pool_out_hw(h, w, stride)
    # -inf padding keeps out-of-bounds cells from ever winning
    xp = np.full((n, c, h + 2, w + 2), -np.inf)
    xp[:, :, 1:1 + h, 1:1 + w] = x
    out = np.full((n, c, oh, ow), -np.inf)
    arg = np.zeros((n, c, oh, ow), dtype=np.int64)
    for i in range(3):
        for j in range(3):
            xs = xp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride]
            better = xs > out  # strict: ties keep the earlier tap
            out = np.where(better, xs, out)
            arg = np.where(better, i * 3 + j, arg)
    return out, arg


def maxpool3_backward(gout, arg, x_shape, stride):
    n, c, h, w = x_shape
    oh, ow = gout.shape[2], gout.shape[3]
    dxp = np.zeros((n, c, h + 2, w + 2))
    for i in range(3):
        for j in range(3):
            sel = (arg == i * 3 + j)
            dxp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += \
                np.where(sel, gout, 0.0)
    return np.ascontiguousarray(dxp[:, :, 1:1 + h, 1:1 + w])
