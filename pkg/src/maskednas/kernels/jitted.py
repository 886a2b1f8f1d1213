"""Numba-compiled kernels, same contracts as :mod:`maskednas.kernels.reference`.

Selected by default when numba imports cleanly; force either backend with
``MASKEDNAS_BACKEND=numba|numpy``. ``cache=True`` persists compiled code
across processes so test runs only pay the compile cost once.
"""

import numpy as np
from numba import njit

from .reference import avgpool3_count_map, conv2d_out_hw  # noqa: F401


@njit(cache=True)
def _conv2d_forward(x, w, stride, pad, dilation, groups):
    n, cin, h, wid = x.shape
    cout, cg, kh, kw = w.shape
    oh = (h + 2 * pad - dilation * (kh - 1) - 1) // stride + 1
    ow = (wid + 2 * pad - dilation * (kw - 1) - 1) // stride + 1
    out = np.zeros((n, cout, oh, ow))
    co_g = cout // groups
    for b in range(n):
        for co in range(cout):
            g = co // co_g
            for i in range(oh):
                h0 = i * stride - pad
                for j in range(ow):
                    w0 = j * stride - pad
                    acc = 0.0
                    for ci in range(cg):
                        c_in = g * cg + ci
                        for p in range(kh):
                            hi = h0 + p * dilation
                            if hi < 0 or hi >= h:
                                continue
                            for q in range(kw):
                                wi = w0 + q * dilation
                                if wi < 0 or wi >= wid:
                                    continue
                                acc += x[b, c_in, hi, wi] * w[co, ci, p, q]
                    out[b, co, i, j] = acc
    return out


@njit(cache=True)
def _conv2d_backward_input(gout, w, n, cin, h, wid, stride, pad, dilation, groups):
    cout, cg, kh, kw = w.shape
    oh = gout.shape[2]
    ow = gout.shape[3]
    dx = np.zeros((n, cin, h, wid))
    co_g = cout // groups
    for b in range(n):
        for co in range(cout):
            g = co // co_g
            for i in range(oh):
                h0 = i * stride - pad
                for j in range(ow):
                    w0 = j * stride - pad
                    go = gout[b, co, i, j]
                    for ci in range(cg):
                        c_in = g * cg + ci
                        for p in range(kh):
                            hi = h0 + p * dilation
                            if hi < 0 or hi >= h:
                                continue
                            for q in range(kw):
                                wi = w0 + q * dilation
                                if wi < 0 or wi >= wid:
                                    continue
                                dx[b, c_in, hi, wi] += go * w[co, ci, p, q]
    return dx


@njit(cache=True)
def _conv2d_backward_weight(gout, x, cout, cg, kh, kw, stride, pad, dilation, groups):
    n, cin, h, wid = x.shape
    oh = gout.shape[2]
    ow = gout.shape[3]
    dw = np.zeros((cout, cg, kh, kw))
    co_g = cout // groups
    for b in range(n):
        for co in range(cout):
            g = co // co_g
            for i in range(oh):
                h0 = i * stride - pad
                for j in range(ow):
                    w0 = j * stride - pad
                    go = gout[b, co, i, j]
                    for ci in range(cg):
                        c_in = g * cg + ci
                        for p in range(kh):
                            hi = h0 + p * dilation
                            if hi < 0 or hi >= h:
                                continue
                            for q in range(kw):
                                wi = w0 + q * dilation
                                if wi < 0 or wi >= wid:
                                    continue
                                dw[co, ci, p, q] += go * x[b, c_in, hi, wi]
    return dw


@njit(cache=True)
def _avgpool3_forward(x, stride):
    n, c, h, w = x.shape
    oh = (h - 1) // stride + 1
    ow = (w - 1) // stride + 1
    out = np.zeros((n, c, oh, ow))
    for b in range(n):
        for ch in range(c):
            for i in range(oh):
                h0 = i * stride - 1
                for j in range(ow):
                    w0 = j * stride - 1
                    acc = 0.0
                    cnt = 0
                    for p in range(3):
                        hi = h0 + p
                        if hi < 0 or hi >= h:
                            continue
                        for q in range(3):
                            wi = w0 + q
                            if wi < 0 or wi >= w:
                                continue
                            acc += x[b, ch, hi, wi]
                            cnt += 1
                    out[b, ch, i, j] = acc / cnt
    return out


@njit(cache=True)
def _avgpool3_backward(gout, n, c, h, w, stride):
    oh = gout.shape[2]
    ow = gout.shape[3]
    dx = np.zeros((n, c, h, w))
    for b in range(n):
        for ch in range(c):
            for i in range(oh):
                h0 = i * stride - 1
                for j in range(ow):
                    w0 = j * stride - 1
                    cnt = 0
                    for p in range(3):
                        hi = h0 + p
                        if 0 <= hi < h:
                            for q in range(3):
                                wi = w0 + q
                                if 0 <= wi < w:
                                    cnt += 1
                    g = gout[b, ch, i, j] / cnt
                    for p in range(3):
                        hi = h0 + p
                        if hi < 0 or hi >= h:
                            continue
                        for q in range(3):
                            wi = w0 + q
                            if 0 <= wi < w:
                                dx[b, ch, hi, wi] += g
    return dx


@njit(cache=True)
def _maxpool3_forward(x, stride):
    n, c, h, w = x.shape
    oh = (h - 1) // stride + 1
    ow = (w - 1) // stride + 1
    out = np.zeros((n, c, oh, ow))
    arg = np.zeros((n, c, oh, ow), dtype=np.int64)
    for b in range(n):
        for ch in range(c):
            for i in range(oh):
                h0 = i * stride - 1
                for j in range(ow):
                    w0 = j * stride - 1
                    best = -np.inf
                    bestk = 0
                    for p in range(3):
                        hi = h0 + p
                        if hi < 0 or hi >= h:
                            continue
                        for q in range(3):
                            wi = w0 + q
                            if wi < 0 or wi >= w:
                                continue
                            v = x[b, ch, hi, wi]
                            if v > best:  # strict: first maximal tap wins
                                best = v
                                bestk = p * 3 + q
                    out[b, ch, i, j] = best
                    arg[b, ch, i, j] = bestk
    return out, arg


@njit(cache=True)
def _maxpool3_backward(gout, arg, n, c, h, w, stride):
    oh = gout.shape[2]
    ow = gout.shape[3]
    dx = np.zeros((n, c, h, w))
    for b in range(n):
        for ch in range(c):
            for i in range(oh):
                for j in range(ow):
                    k = arg[b, ch, i, j]
                    hi = i * stride - 1 + k // 3
                    wi = j * stride - 1 + k % 3
                    dx[b, ch, hi, wi] += gout[b, ch, i, j]
    return dx


def conv2d_forward(x, w, stride, pad, dilation, groups):
    return _conv2d_forward(x, w, stride, pad, dilation, groups)


def conv2d_backward_input(gout, w, x_shape, stride, pad, dilation, groups):
    n, cin, h, wid = x_shape
    return _conv2d_backward_input(gout, w, n, cin, h, wid, stride, pad, dilation, groups)


def conv2d_backward_weight(gout, x, w_shape, stride, pad, dilation, groups):
    cout, cg, kh, kw = w_shape
    return _conv2d_backward_weight(gout, x, cout, cg, kh, kw, stride, pad, dilation, groups)


def avgpool3_forward(x, stride):
    return _avgpool3_forward(x, stride)


def avgpool3_backward(gout, x_shape, stride):
    n, c, h, w = x_shape
    return _avgpool3_backward(gout, n, c, h, w, stride)


def maxpool3_forward(x, stride):
    return _maxpool3_forward(x, stride)


def maxpool3_backward(gout, arg, x_shape, stride):
    n, c, h, w = x_shape
    return _maxpool3_backward(gout, arg, n, c, h, w, stride)
