"""Numba-jitted hot kernels. Same contracts as ``numpy_impl``.

All kernels are serial njit loops: at the tensor sizes this package runs,
single-core compiled loops are already far ahead of the interpreter, and
keeping them serial makes every run bitwise reproducible.
"""

import numpy as np
from numba import njit

from .numpy_impl import conv_output_size


@njit(cache=True)
def _conv2d_forward(x, w, sh, sw, dh, dw, groups, ph, pw, ho, wo):
    n, cin, h, width = x.shape
    cout, cg, kh, kw = w.shape
    og = cout // groups
    y = np.zeros((n, cout, ho, wo), dtype=x.dtype)
    for b in range(n):
        for o in range(cout):
            g = o // og
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0
                    for ci in range(cg):
                        cx = g * cg + ci
                        for r in range(kh):
                            hi = i * sh - ph + r * dh
                            if hi < 0 or hi >= h:
                                continue
                            for c in range(kw):
                                wi = j * sw - pw + c * dw
                                if wi < 0 or wi >= width:
                                    continue
                                acc += x[b, cx, hi, wi] * w[o, ci, r, c]
                    y[b, o, i, j] = acc
    return y


def conv2d_forward(x, w, stride, dilation, groups):
    kh, kw = w.shape[2], w.shape[3]
    ho, ph = conv_output_size(x.shape[2], kh, stride[0], dilation[0])
    wo, pw = conv_output_size(x.shape[3], kw, stride[1], dilation[1])
    return _conv2d_forward(x, w, stride[0], stride[1], dilation[0], dilation[1],
                           groups, ph, pw, ho, wo)


@njit(cache=True)
def _conv2d_backward(x, w, gy, sh, sw, dh, dw, groups, ph, pw):
    n, cin, h, width = x.shape
    cout, cg, kh, kw = w.shape
    ho, wo = gy.shape[2], gy.shape[3]
    og = cout // groups
    gx = np.zeros_like(x)
    gw = np.zeros_like(w)
    for b in range(n):
        for o in range(cout):
            g = o // og
            for i in range(ho):
                for j in range(wo):
                    gout = gy[b, o, i, j]
                    if gout == 0.0:
                        continue
                    for ci in range(cg):
                        cx = g * cg + ci
                        for r in range(kh):
                            hi = i * sh - ph + r * dh
                            if hi < 0 or hi >= h:
                                continue
                            for c in range(kw):
                                wi = j * sw - pw + c * dw
                                if wi < 0 or wi >= width:
                                    continue
                                gw[o, ci, r, c] += gout * x[b, cx, hi, wi]
                                gx[b, cx, hi, wi] += gout * w[o, ci, r, c]
    return gx, gw


def conv2d_backward(x, w, gy, stride, dilation, groups):
    kh, kw = w.shape[2], w.shape[3]
    _, ph = conv_output_size(x.shape[2], kh, stride[0], dilation[0])
    _, pw = conv_output_size(x.shape[3], kw, stride[1], dilation[1])
    return _conv2d_backward(x, w, gy, stride[0], stride[1], dilation[0],
                            dilation[1], groups, ph, pw)


@njit(cache=True)
def bilinear_forward(feat, coords):
    n, c, h, w = feat.shape
    ho, wo = coords.shape[2], coords.shape[3]
    out = np.empty((n, c, ho, wo), dtype=feat.dtype)
    for b in range(n):
        for i in range(ho):
            for j in range(wo):
                y = coords[b, 0, i, j]
                x = coords[b, 1, i, j]
                if y < 0.0:
                    y = 0.0
                elif y > h - 1.0:
                    y = h - 1.0
                if x < 0.0:
                    x = 0.0
                elif x > w - 1.0:
                    x = w - 1.0
                y0 = int(np.floor(y))
                x0 = int(np.floor(x))
                if y0 > h - 2:
                    y0 = h - 2
                if x0 > w - 2:
                    x0 = w - 2
                if y0 < 0:
                    y0 = 0
                if x0 < 0:
                    x0 = 0
                fy = y - y0
                fx = x - x0
                y1 = min(y0 + 1, h - 1)
                x1 = min(x0 + 1, w - 1)
                w00 = (1.0 - fy) * (1.0 - fx)
                w01 = (1.0 - fy) * fx
                w10 = fy * (1.0 - fx)
                w11 = fy * fx
                for ch in range(c):
                    out[b, ch, i, j] = (w00 * feat[b, ch, y0, x0]
                                        + w01 * feat[b, ch, y0, x1]
                                        + w10 * feat[b, ch, y1, x0]
                                        + w11 * feat[b, ch, y1, x1])
    return out


@njit(cache=True)
def bilinear_backward(feat, coords, gy):
    n, c, h, w = feat.shape
    ho, wo = coords.shape[2], coords.shape[3]
    gfeat = np.zeros_like(feat)
    gcoords = np.zeros_like(coords)
    for b in range(n):
        for i in range(ho):
            for j in range(wo):
                yr = coords[b, 0, i, j]
                xr = coords[b, 1, i, j]
                ycl = yr < 0.0 or yr > h - 1.0
                xcl = xr < 0.0 or xr > w - 1.0
                y = min(max(yr, 0.0), h - 1.0)
                x = min(max(xr, 0.0), w - 1.0)
                y0 = int(np.floor(y))
                x0 = int(np.floor(x))
                if y0 > h - 2:
                    y0 = h - 2
                if x0 > w - 2:
                    x0 = w - 2
                if y0 < 0:
                    y0 = 0
                if x0 < 0:
                    x0 = 0
                fy = y - y0
                fx = x - x0
                y1 = min(y0 + 1, h - 1)
                x1 = min(x0 + 1, w - 1)
                w00 = (1.0 - fy) * (1.0 - fx)
                w01 = (1.0 - fy) * fx
                w10 = fy * (1.0 - fx)
                w11 = fy * fx
                dy = 0.0
                dx = 0.0
                for ch in range(c):
                    g = gy[b, ch, i, j]
                    f00 = feat[b, ch, y0, x0]
                    f01 = feat[b, ch, y0, x1]
                    f10 = feat[b, ch, y1, x0]
                    f11 = feat[b, ch, y1, x1]
                    gfeat[b, ch, y0, x0] += w00 * g
                    gfeat[b, ch, y0, x1] += w01 * g
                    gfeat[b, ch, y1, x0] += w10 * g
                    gfeat[b, ch, y1, x1] += w11 * g
                    dy += ((1.0 - fx) * (f10 - f00) + fx * (f11 - f01)) * g
                    dx += ((1.0 - fy) * (f01 - f00) + fy * (f11 - f10)) * g
                if not ycl:
                    gcoords[b, 0, i, j] = dy
                if not xcl:
                    gcoords[b, 1, i, j] = dx
    return gfeat, gcoords


@njit(cache=True)
def _maxpool_forward(x, kh, kw, sh, sw):
    n, c, h, w = x.shape
    ho = (h - kh) // sh + 1
    wo = (w - kw) // sw + 1
    out = np.empty((n, c, ho, wo), dtype=x.dtype)
    arg = np.empty((n, c, ho, wo), dtype=np.int64)
    for b in range(n):
        for ch in range(c):
            for i in range(ho):
                for j in range(wo):
                    best = -np.inf
                    bidx = 0
                    for r in range(kh):
                        for cc in range(kw):
                            hi = i * sh + r
                            wi = j * sw + cc
                            v = x[b, ch, hi, wi]
                            if v > best:
                                best = v
                                bidx = hi * w + wi
                    out[b, ch, i, j] = best
                    arg[b, ch, i, j] = bidx
    return out, arg


def maxpool_forward(x, kernel, stride):
    return _maxpool_forward(x, kernel[0], kernel[1], stride[0], stride[1])


@njit(cache=True)
def maxpool_backward(gy, arg, h, w):
    n, c, ho, wo = gy.shape
    gx = np.zeros((n, c, h, w), dtype=gy.dtype)
    for b in range(n):
        for ch in range(c):
            for i in range(ho):
                for j in range(wo):
                    idx = arg[b, ch, i, j]
                    gx[b, ch, idx // w, idx % w] += gy[b, ch, i, j]
    return gx


@njit(cache=True)
def _resize_src(i, in_size, out_size):
    if out_size == 1:
        return 0.0
    return i * ((in_size - 1.0) / (out_size - 1.0))


@njit(cache=True)
def resize_bilinear_forward(x, out_h, out_w):
    n, c, h, w = x.shape
    out = np.empty((n, c, out_h, out_w), dtype=x.dtype)
    for i in range(out_h):
        ys = _resize_src(i, h, out_h)
        y0 = min(int(np.floor(ys)), max(h - 2, 0))
        fy = ys - y0
        y1 = min(y0 + 1, h - 1)
        for j in range(out_w):
            xs = _resize_src(j, w, out_w)
            x0 = min(int(np.floor(xs)), max(w - 2, 0))
            fx = xs - x0
            x1 = min(x0 + 1, w - 1)
            w00 = (1.0 - fy) * (1.0 - fx)
            w01 = (1.0 - fy) * fx
            w10 = fy * (1.0 - fx)
            w11 = fy * fx
            for b in range(n):
                for ch in range(c):
                    out[b, ch, i, j] = (w00 * x[b, ch, y0, x0]
                                        + w01 * x[b, ch, y0, x1]
                                        + w10 * x[b, ch, y1, x0]
                                        + w11 * x[b, ch, y1, x1])
    return out


@njit(cache=True)
def resize_bilinear_backward(gy, in_h, in_w):
    n, c, ho, wo = gy.shape
    gx = np.zeros((n, c, in_h, in_w), dtype=gy.dtype)
    for i in range(ho):
        ys = _resize_src(i, in_h, ho)
        y0 = min(int(np.floor(ys)), max(in_h - 2, 0))
        fy = ys - y0
        y1 = min(y0 + 1, in_h - 1)
        for j in range(wo):
            xs = _resize_src(j, in_w, wo)
            x0 = min(int(np.floor(xs)), max(in_w - 2, 0))
            fx = xs - x0
            x1 = min(x0 + 1, in_w - 1)
            w00 = (1.0 - fy) * (1.0 - fx)
            w01 = (1.0 - fy) * fx
            w10 = fy * (1.0 - fx)
            w11 = fy * fx
            for b in range(n):
                for ch in range(c):
                    g = gy[b, ch, i, j]
                    gx[b, ch, y0, x0] += w00 * g
                    gx[b, ch, y0, x1] += w01 * g
                    gx[b, ch, y1, x0] += w10 * g
                    gx[b, ch, y1, x1] += w11 * g
    return gx


@njit(cache=True)
def aggregate_forward(sampled, affinity, filters):
    n, c, k, h, w = sampled.shape
    g = filters.shape[2]
    cg = c // g
    m = np.zeros((n, c, h, w), dtype=sampled.dtype)
    for b in range(n):
        for ch in range(c):
            gi = ch // cg
            for i in range(h):
                for j in range(w):
                    acc = 0.0
                    for s in range(k):
                        acc += (affinity[b, s, i, j]
                                * sampled[b, ch, s, i, j]
                                * filters[b, s, gi, i, j])
                    m[b, ch, i, j] = acc
    return m


@njit(cache=True)
def aggregate_backward(sampled, affinity, filters, gm):
    n, c, k, h, w = sampled.shape
    g = filters.shape[2]
    cg = c // g
    gs = np.zeros_like(sampled)
    ga = np.zeros_like(affinity)
    gf = np.zeros_like(filters)
    for b in range(n):
        for ch in range(c):
            gi = ch // cg
            for i in range(h):
                for j in range(w):
                    gout = gm[b, ch, i, j]
                    if gout == 0.0:
                        continue
                    for s in range(k):
                        a = affinity[b, s, i, j]
                        f = filters[b, s, gi, i, j]
                        v = sampled[b, ch, s, i, j]
                        gs[b, ch, s, i, j] += gout * a * f
                        ga[b, s, i, j] += gout * v * f
                        gf[b, s, gi, i, j] += gout * a * v
    return gs, ga, gf
