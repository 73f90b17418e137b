"""Pure-numpy reference implementations of the hot numeric kernels.

Every function here has a numba twin in ``numba_impl`` with identical
semantics; the arithmetic inside the bilinear kernels is written in the
same order in both so results agree to the last bit wherever the
evaluation order is the only degree of freedom.

Conventions shared by both backends:
  * conv2d uses "same" zero padding derived from the kernel size:
    pad = dilation * (k - 1) // 2 per axis (odd kernels).
  * bilinear coordinates are absolute pixel units, channel 0 = row (y),
    channel 1 = column (x); out-of-range coordinates are clamped and the
    clamped component receives zero gradient.
  * maxpool breaks ties toward the first element in row-major window order.
"""

import numpy as np


def conv_output_size(size, k, stride, dilation):
    pad = dilation * (k - 1) // 2
    return (size + 2 * pad - dilation * (k - 1) - 1) // stride + 1, pad


def conv2d_forward(x, w, stride, dilation, groups):
    n, cin, h, width = x.shape
    cout, cg, kh, kw = w.shape
    sh, sw = stride
    dh, dw = dilation
    ho, ph = conv_output_size(h, kh, sh, dh)
    wo, pw = conv_output_size(width, kw, sw, dw)
    xp = np.zeros((n, cin, h + 2 * ph, width + 2 * pw), dtype=x.dtype)
    xp[:, :, ph:ph + h, pw:pw + width] = x
    og = cout // groups
    # accumulate in (cout, n, ho, wo) layout, transpose once at the end
    acc = np.zeros((cout, n, ho, wo), dtype=x.dtype)
    for g in range(groups):
        xg = xp[:, g * cg:(g + 1) * cg]
        wg = w[g * og:(g + 1) * og]
        for r in range(kh):
            for c in range(kw):
                xs = xg[:, :, r * dh:r * dh + (ho - 1) * sh + 1:sh,
                        c * dw:c * dw + (wo - 1) * sw + 1:sw]
                acc[g * og:(g + 1) * og] += np.tensordot(
                    wg[:, :, r, c], xs, axes=([1], [1]))
    return np.ascontiguousarray(acc.transpose(1, 0, 2, 3))


def conv2d_backward(x, w, gy, stride, dilation, groups):
    n, cin, h, width = x.shape
    cout, cg, kh, kw = w.shape
    sh, sw = stride
    dh, dw = dilation
    ho, ph = conv_output_size(h, kh, sh, dh)
    wo, pw = conv_output_size(width, kw, sw, dw)
    xp = np.zeros((n, cin, h + 2 * ph, width + 2 * pw), dtype=x.dtype)
    xp[:, :, ph:ph + h, pw:pw + width] = x
    gxp = np.zeros_like(xp)
    gw = np.zeros_like(w)
    og = cout // groups
    for g in range(groups):
        xg = xp[:, g * cg:(g + 1) * cg]
        wg = w[g * og:(g + 1) * og]
        gyg = gy[:, g * og:(g + 1) * og]
        for r in range(kh):
            for c in range(kw):
                rs = slice(r * dh, r * dh + (ho - 1) * sh + 1, sh)
                cs = slice(c * dw, c * dw + (wo - 1) * sw + 1, sw)
                xs = xg[:, :, rs, cs]
                gw[g * og:(g + 1) * og, :, r, c] = np.tensordot(
                    gyg, xs, axes=([0, 2, 3], [0, 2, 3]))
                gxp[:, g * cg:(g + 1) * cg, rs, cs] += np.tensordot(
                    wg[:, :, r, c], gyg, axes=([0], [1])).transpose(1, 0, 2, 3)
    gx = gxp[:, :, ph:ph + h, pw:pw + width]
    return np.ascontiguousarray(gx), gw


def _bilinear_corners(coords, h, w):
    """Clamp coords and return corner indices, fractional weights and the
    per-component clamped mask (True where the raw coordinate was outside)."""
    yr = coords[:, 0]
    xr = coords[:, 1]
    y_clamped = (yr < 0.0) | (yr > h - 1.0)
    x_clamped = (xr < 0.0) | (xr > w - 1.0)
    y = np.clip(yr, 0.0, h - 1.0)
    x = np.clip(xr, 0.0, w - 1.0)
    y0 = np.floor(y).astype(np.int64)
    x0 = np.floor(x).astype(np.int64)
    np.minimum(y0, h - 2, out=y0)
    np.minimum(x0, w - 2, out=x0)
    np.maximum(y0, 0, out=y0)
    np.maximum(x0, 0, out=x0)
    fy = y - y0
    fx = x - x0
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    return y0, x0, y1, x1, fy, fx, y_clamped, x_clamped


def _gather(feat_flat, yi, xi, w):
    # feat_flat: (N, C, H*W); yi/xi: (N, Ho, Wo)
    n, c, _ = feat_flat.shape
    idx = (yi * w + xi)[:, None, :, :]
    idx = np.broadcast_to(idx, (n, c) + idx.shape[2:])
    return np.take_along_axis(feat_flat, idx.reshape(n, c, -1), axis=2)


def bilinear_forward(feat, coords):
    n, c, h, w = feat.shape
    ho, wo = coords.shape[2], coords.shape[3]
    y0, x0, y1, x1, fy, fx, _, _ = _bilinear_corners(coords, h, w)
    flat = feat.reshape(n, c, h * w)
    f00 = _gather(flat, y0, x0, w)
    f01 = _gather(flat, y0, x1, w)
    f10 = _gather(flat, y1, x0, w)
    f11 = _gather(flat, y1, x1, w)
    fy = fy.reshape(n, 1, -1)
    fx = fx.reshape(n, 1, -1)
    w00 = (1.0 - fy) * (1.0 - fx)
    w01 = (1.0 - fy) * fx
    w10 = fy * (1.0 - fx)
    w11 = fy * fx
    out = w00 * f00 + w01 * f01 + w10 * f10 + w11 * f11
    return out.reshape(n, c, ho, wo)


def bilinear_backward(feat, coords, gy):
    n, c, h, w = feat.shape
    ho, wo = coords.shape[2], coords.shape[3]
    y0, x0, y1, x1, fy, fx, ycl, xcl = _bilinear_corners(coords, h, w)
    flat = feat.reshape(n, c, h * w)
    f00 = _gather(flat, y0, x0, w)
    f01 = _gather(flat, y0, x1, w)
    f10 = _gather(flat, y1, x0, w)
    f11 = _gather(flat, y1, x1, w)
    fyb = fy.reshape(n, 1, -1)
    fxb = fx.reshape(n, 1, -1)
    g = gy.reshape(n, c, -1)

    gfeat = np.zeros_like(flat)
    nn = np.arange(n)[:, None, None]
    cc = np.arange(c)[None, :, None]
    for yi, xi, wgt in (
        (y0, x0, (1.0 - fyb) * (1.0 - fxb)),
        (y0, x1, (1.0 - fyb) * fxb),
        (y1, x0, fyb * (1.0 - fxb)),
        (y1, x1, fyb * fxb),
    ):
        idx = (yi * w + xi).reshape(n, 1, -1)
        np.add.at(gfeat, (nn, cc, idx), wgt * g)

    # d out / d y and d out / d x, summed over channels
    dy = ((1.0 - fxb) * (f10 - f00) + fxb * (f11 - f01)) * g
    dx = ((1.0 - fyb) * (f01 - f00) + fyb * (f11 - f10)) * g
    dy = dy.sum(axis=1).reshape(n, ho, wo)
    dx = dx.sum(axis=1).reshape(n, ho, wo)
    dy[ycl] = 0.0
    dx[xcl] = 0.0
    gcoords = np.stack([dy, dx], axis=1)
    return gfeat.reshape(feat.shape), gcoords


def maxpool_forward(x, kernel, stride):
    n, c, h, w = x.shape
    kh, kw = kernel
    sh, sw = stride
    ho = (h - kh) // sh + 1
    wo = (w - kw) // sw + 1
    out = np.full((n, c, ho, wo), -np.inf, dtype=x.dtype)
    arg = np.zeros((n, c, ho, wo), dtype=np.int64)
    for r in range(kh):
        for cc in range(kw):
            xs = x[:, :, r:r + (ho - 1) * sh + 1:sh, cc:cc + (wo - 1) * sw + 1:sw]
            # strict > keeps the first (row-major) maximal element
            better = xs > out
            rows = (np.arange(ho) * sh + r)[None, None, :, None]
            cols = (np.arange(wo) * sw + cc)[None, None, None, :]
            flat = rows * w + cols
            arg = np.where(better, flat, arg)
            out = np.where(better, xs, out)
    return out, arg


def maxpool_backward(gy, arg, h, w):
    n, c = gy.shape[0], gy.shape[1]
    gx = np.zeros((n, c, h * w), dtype=gy.dtype)
    nn = np.arange(n)[:, None, None]
    cc = np.arange(c)[None, :, None]
    np.add.at(gx, (nn, cc, arg.reshape(n, c, -1)), gy.reshape(n, c, -1))
    return gx.reshape(n, c, h, w)


def _resize_grid(in_size, out_size):
    """Corner-aligned source coordinates for a 1-D resize."""
    if out_size == 1:
        return np.zeros(1, dtype=np.float64)
    scale = (in_size - 1.0) / (out_size - 1.0)
    return np.arange(out_size, dtype=np.float64) * scale


def resize_bilinear_forward(x, out_h, out_w):
    n, c, h, w = x.shape
    ys = _resize_grid(h, out_h)
    xs = _resize_grid(w, out_w)
    y0 = np.minimum(np.floor(ys).astype(np.int64), max(h - 2, 0))
    x0 = np.minimum(np.floor(xs).astype(np.int64), max(w - 2, 0))
    fy = (ys - y0).astype(x.dtype)
    fx = (xs - x0).astype(x.dtype)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fyc = fy[None, None, :, None]
    fxc = fx[None, None, None, :]
    f00 = x[:, :, y0][:, :, :, x0]
    f01 = x[:, :, y0][:, :, :, x1]
    f10 = x[:, :, y1][:, :, :, x0]
    f11 = x[:, :, y1][:, :, :, x1]
    w00 = (1.0 - fyc) * (1.0 - fxc)
    w01 = (1.0 - fyc) * fxc
    w10 = fyc * (1.0 - fxc)
    w11 = fyc * fxc
    return w00 * f00 + w01 * f01 + w10 * f10 + w11 * f11


def resize_bilinear_backward(gy, in_h, in_w):
    n, c, ho, wo = gy.shape
    ys = _resize_grid(in_h, ho)
    xs = _resize_grid(in_w, wo)
    y0 = np.minimum(np.floor(ys).astype(np.int64), max(in_h - 2, 0))
    x0 = np.minimum(np.floor(xs).astype(np.int64), max(in_w - 2, 0))
    fy = ys - y0
    fx = xs - x0
    y1 = np.minimum(y0 + 1, in_h - 1)
    x1 = np.minimum(x0 + 1, in_w - 1)
    gx = np.zeros((n, c, in_h, in_w), dtype=gy.dtype)
    for yi, wy in ((y0, 1.0 - fy), (y1, fy)):
        for xi, wx in ((x0, 1.0 - fx), (x1, fx)):
            wgt = (wy[:, None] * wx[None, :]).astype(gy.dtype)
            np.add.at(gx, (slice(None), slice(None), yi[:, None], xi[None, :]),
                      wgt[None, None] * gy)
    return gx


def aggregate_forward(sampled, affinity, filters):
    """Affinity-weighted, filter-modulated sum over sampled node slots.

    sampled: (N, C, K, H, W); affinity: (N, K, H, W);
    filters: (N, K, G, H, W) with groups partitioning channels.
    """
    n, c, k, h, w = sampled.shape
    g = filters.shape[2]
    s6 = sampled.reshape(n, g, c // g, k, h, w)
    m = np.einsum('njhw,ngcjhw,njghw->ngchw', affinity, s6, filters)
    return m.reshape(n, c, h, w)


def aggregate_backward(sampled, affinity, filters, gm):
    n, c, k, h, w = sampled.shape
    g = filters.shape[2]
    s6 = sampled.reshape(n, g, c // g, k, h, w)
    gm6 = gm.reshape(n, g, c // g, h, w)
    gs = np.einsum('njhw,njghw,ngchw->ngcjhw', affinity, filters, gm6)
    ga = np.einsum('ngcjhw,njghw,ngchw->njhw', s6, filters, gm6)
    gf = np.einsum('njhw,ngcjhw,ngchw->njghw', affinity, s6, gm6)
    return gs.reshape(sampled.shape), ga, gf
