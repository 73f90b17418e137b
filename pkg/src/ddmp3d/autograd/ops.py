"""Differentiable primitives over ``Tensor``.

Broadcasting is deliberately narrow: elementwise binaries accept exactly
matching shapes or a size-1 operand (scalar broadcast), nothing else.
Anything fancier must be spelled out with reshape/concat/narrow, which
keeps every backward rule obvious.

Hot kernels (conv2d, bilinear_sample, maxpool, resize, aggregate_nodes)
dispatch to the selected backend in ``ddmp3d.kernels``.
"""

import numpy as np

from .. import kernels
from .tensor import Tensor, active_tape


def _as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype if dtype is not None else np.float64))


def _apply(op, inputs, out_data, backward_fn):
    out = Tensor(out_data)
    out.requires_grad = any(i.requires_grad for i in inputs)
    tape = active_tape()
    if tape is not None and out.requires_grad:
        tape.record(op, tuple(inputs), out, backward_fn)
    return out


def _binary_operands(a, b, op):
    a = _as_tensor(a)
    b = _as_tensor(b, dtype=a.dtype)
    if a.shape == b.shape:
        return a, b, None
    if b.size == 1:
        return a, b, "b"
    if a.size == 1:
        return a, b, "a"
    raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape} "
                     "(only exact match or scalar broadcast is supported)")


def add(a, b):
    a, b, scalar = _binary_operands(a, b, "add")
    if scalar is None:
        out = a.data + b.data
        bwd = lambda g: (g, g)
    elif scalar == "b":
        out = a.data + b.data.reshape(())
        bwd = lambda g: (g, g.sum().reshape(b.shape))
    else:
        out = a.data.reshape(()) + b.data
        bwd = lambda g: (g.sum().reshape(a.shape), g)
    return _apply("add", (a, b), out, bwd)


def sub(a, b):
    a, b, scalar = _binary_operands(a, b, "sub")
    if scalar is None:
        out = a.data - b.data
        bwd = lambda g: (g, -g)
    elif scalar == "b":
        out = a.data - b.data.reshape(())
        bwd = lambda g: (g, -g.sum().reshape(b.shape))
    else:
        out = a.data.reshape(()) - b.data
        bwd = lambda g: (g.sum().reshape(a.shape), -g)
    return _apply("sub", (a, b), out, bwd)


def mul(a, b):
    a, b, scalar = _binary_operands(a, b, "mul")
    ad, bd = a.data, b.data
    if scalar is None:
        out = ad * bd
        bwd = lambda g: (g * bd, g * ad)
    elif scalar == "b":
        out = ad * bd.reshape(())
        bwd = lambda g: (g * bd.reshape(()), (g * ad).sum().reshape(b.shape))
    else:
        out = ad.reshape(()) * bd
        bwd = lambda g: ((g * bd).sum().reshape(a.shape), g * ad.reshape(()))
    return _apply("mul", (a, b), out, bwd)


def scale(t, s):
    t = _as_tensor(t)
    s = float(s)
    return _apply("scale", (t,), t.data * s, lambda g: (g * s,))


def exp(t):
    t = _as_tensor(t)
    out = np.exp(t.data)
    return _apply("exp", (t,), out, lambda g: (g * out,))


def log(t):
    t = _as_tensor(t)
    if np.any(t.data <= 0.0):
        raise ValueError("log: input has non-positive values")
    return _apply("log", (t,), np.log(t.data), lambda g: (g / t.data,))


def power(t, p):
    """Elementwise t**p for a python float exponent.

    Negative bases are rejected for non-integer p; the subgradient at an
    exact zero base with p < 1 is taken as 0 to keep values finite.
    """
    t = _as_tensor(t)
    p = float(p)
    if p != round(p) and np.any(t.data < 0.0):
        raise ValueError("power: negative base with non-integer exponent")
    out = np.power(t.data, p)

    def bwd(g):
        base = t.data
        if p < 1.0:
            safe = np.where(base == 0.0, 1.0, base)
            d = np.where(base == 0.0, 0.0, p * np.power(safe, p - 1.0))
        else:
            d = p * np.power(base, p - 1.0)
        return (g * d,)

    return _apply("power", (t,), out, bwd)


def relu(t):
    t = _as_tensor(t)
    mask = t.data > 0.0
    return _apply("relu", (t,), np.where(mask, t.data, 0.0),
                  lambda g: (g * mask,))


def softmax(t, axis):
    """Max-stabilized softmax along one axis; outputs sum to 1 there."""
    t = _as_tensor(t)
    if not -t.ndim <= axis < t.ndim:
        raise ValueError(f"softmax: axis {axis} invalid for shape {t.shape}")
    z = t.data - t.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        inner = (g * s).sum(axis=axis, keepdims=True)
        return (s * (g - inner),)

    return _apply("softmax", (t,), s, bwd)


def log_softmax(t, axis):
    t = _as_tensor(t)
    if not -t.ndim <= axis < t.ndim:
        raise ValueError(f"log_softmax: axis {axis} invalid for shape {t.shape}")
    z = t.data - t.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    soft = np.exp(out)

    def bwd(g):
        return (g - soft * g.sum(axis=axis, keepdims=True),)

    return _apply("log_softmax", (t,), out, bwd)


def matmul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    return _apply("matmul", (a, b), ad @ bd,
                  lambda g: (g @ bd.T, ad.T @ g))


def sum(t, axis=None, keepdims=False):  # noqa: A001 - mirrors ndarray.sum
    t = _as_tensor(t)
    out = t.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g, t.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, t.shape).copy(),)

    return _apply("sum", (t,), out, bwd)


def mean(t, axis=None, keepdims=False):
    t = _as_tensor(t)
    n = t.size if axis is None else t.shape[axis]
    if n == 0:
        raise ValueError("mean over an empty axis")
    out = t.data.mean(axis=axis, keepdims=keepdims)

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g / n, t.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg / n, t.shape).copy(),)

    return _apply("mean", (t,), out, bwd)


def concat(tensors, axis):
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise ValueError("concat of an empty sequence")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.split(g, splits, axis=axis))

    return _apply("concat", tuple(tensors), out, bwd)


def reshape(t, shape):
    t = _as_tensor(t)
    out = t.data.reshape(shape)
    orig = t.shape
    return _apply("reshape", (t,), out, lambda g: (g.reshape(orig),))


def transpose(t, axes):
    t = _as_tensor(t)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _apply("transpose", (t,), np.ascontiguousarray(t.data.transpose(axes)),
                  lambda g: (g.transpose(inv),))


def narrow(t, axis, start, length):
    """Contiguous slice along one axis (differentiable)."""
    t = _as_tensor(t)
    idx = [slice(None)] * t.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)
    out = np.ascontiguousarray(t.data[idx])

    def bwd(g):
        full = np.zeros(t.shape, dtype=g.dtype)
        full[idx] = g
        return (full,)

    return _apply("narrow", (t,), out, bwd)


def gather_rows(t, index):
    """Select rows along axis 0 by an integer index array."""
    t = _as_tensor(t)
    index = np.asarray(index, dtype=np.int64)
    out = t.data[index]

    def bwd(g):
        full = np.zeros(t.shape, dtype=g.dtype)
        np.add.at(full, index, g)
        return (full,)

    return _apply("gather_rows", (t,), out, bwd)


def scatter_rows(t, index, length):
    """Place rows of ``t`` at ``index`` within a zero tensor of ``length``
    rows (indices must be unique); the adjoint of gather_rows."""
    t = _as_tensor(t)
    index = np.asarray(index, dtype=np.int64)
    if index.size != np.unique(index).size:
        raise ValueError("scatter_rows: duplicate indices")
    shape = (length,) + t.shape[1:]
    out = np.zeros(shape, dtype=t.dtype)
    out[index] = t.data

    def bwd(g):
        return (g[index],)

    return _apply("scatter_rows", (t,), out, bwd)


def gather_per_row(t, cols):
    """For a 2-d tensor, pick one column per row: out[i] = t[i, cols[i]]."""
    t = _as_tensor(t)
    if t.ndim != 2:
        raise ValueError(f"gather_per_row expects a 2-d tensor, got {t.shape}")
    cols = np.asarray(cols, dtype=np.int64)
    rows = np.arange(t.shape[0])
    out = t.data[rows, cols]

    def bwd(g):
        full = np.zeros(t.shape, dtype=g.dtype)
        full[rows, cols] = g
        return (full,)

    return _apply("gather_per_row", (t,), out, bwd)


def huber(t):
    """Unit-threshold smooth-L1 applied elementwise to a difference tensor:
    0.5 d^2 for |d| < 1, |d| - 0.5 beyond; subgradient sign(d) at |d| = 1."""
    t = _as_tensor(t)
    d = t.data
    small = np.abs(d) < 1.0
    out = np.where(small, 0.5 * d * d, np.abs(d) - 0.5)
    return _apply("huber", (t,), out, lambda g: (g * np.clip(d, -1.0, 1.0),))


def _pair(v, name):
    if isinstance(v, int):
        return (v, v)
    v = tuple(v)
    if len(v) != 2:
        raise ValueError(f"{name} must be an int or a pair")
    return v


def conv2d(x, weight, bias=None, stride=1, dilation=1, groups=1):
    """2-d convolution with 'same' zero padding derived from the (odd)
    kernel size; output spatial size floor((S + 2p - d(k-1) - 1)/s) + 1."""
    x, weight = _as_tensor(x), _as_tensor(weight)
    stride = _pair(stride, "stride")
    dilation = _pair(dilation, "dilation")
    if x.ndim != 4 or weight.ndim != 4:
        raise ValueError(f"conv2d: expected 4-d input/weight, got {x.shape} / {weight.shape}")
    n, cin, h, w = x.shape
    cout, cg, kh, kw = weight.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError(f"conv2d: kernel must be odd for same padding, got {kh}x{kw}")
    if cin % groups or cout % groups or cg != cin // groups:
        raise ValueError(
            f"conv2d: channel/group mismatch: input {cin} channels, weight "
            f"{weight.shape}, groups={groups}")
    ho, _ = kernels.conv_output_size(h, kh, stride[0], dilation[0])
    wo, _ = kernels.conv_output_size(w, kw, stride[1], dilation[1])
    if ho < 1 or wo < 1:
        raise ValueError(f"conv2d: zero-size output for input {h}x{w}")
    out = kernels.conv2d_forward(x.data, weight.data, stride, dilation, groups)
    inputs = [x, weight]
    if bias is not None:
        bias = _as_tensor(bias)
        if bias.shape != (cout,):
            raise ValueError(f"conv2d: bias shape {bias.shape} != ({cout},)")
        out = out + bias.data[None, :, None, None]
        inputs.append(bias)

    def bwd(g):
        gx, gw = kernels.conv2d_backward(x.data, weight.data, g,
                                         stride, dilation, groups)
        if bias is None:
            return (gx, gw)
        return (gx, gw, g.sum(axis=(0, 2, 3)))

    return _apply("conv2d", tuple(inputs), out, bwd)


def bilinear_sample(feature, coords):
    """Sample feature at per-position absolute pixel coordinates.

    coords is (N, 2, Ho, Wo) with channel 0 = row, channel 1 = column.
    Coordinates are clamped to the grid; a clamped component gets zero
    gradient. Differentiable in both the feature values and the coords.
    """
    feature, coords = _as_tensor(feature), _as_tensor(coords)
    if feature.ndim != 4 or coords.ndim != 4 or coords.shape[1] != 2:
        raise ValueError(f"bilinear_sample: bad shapes {feature.shape} / {coords.shape}")
    if feature.shape[0] != coords.shape[0]:
        raise ValueError("bilinear_sample: batch sizes differ")
    out = kernels.bilinear_forward(feature.data, coords.data)

    def bwd(g):
        return kernels.bilinear_backward(feature.data, coords.data, g)

    return _apply("bilinear_sample", (feature, coords), out, bwd)


def maxpool2d(t, kernel, stride=None):
    t = _as_tensor(t)
    kernel = _pair(kernel, "kernel")
    stride = kernel if stride is None else _pair(stride, "stride")
    n, c, h, w = t.shape
    if kernel[0] > h or kernel[1] > w:
        raise ValueError(f"maxpool2d: kernel {kernel} larger than input {h}x{w}")
    out, arg = kernels.maxpool_forward(t.data, kernel, stride)

    def bwd(g):
        return (kernels.maxpool_backward(g, arg, h, w),)

    return _apply("maxpool2d", (t,), out, bwd)


def resize(t, size, mode="bilinear"):
    """Spatial resize with a corner-aligned grid (endpoints map to
    endpoints, so same-size resize is exactly the identity)."""
    t = _as_tensor(t)
    oh, ow = size
    if oh < 1 or ow < 1:
        raise ValueError(f"resize: target size {size} must be positive")
    n, c, h, w = t.shape
    if (oh, ow) == (h, w):
        return _apply("resize", (t,), t.data.copy(), lambda g: (g,))
    if mode == "bilinear":
        out = kernels.resize_bilinear_forward(t.data, oh, ow)

        def bwd(g):
            return (kernels.resize_bilinear_backward(g, h, w),)

        return _apply("resize", (t,), out, bwd)
    if mode == "nearest":
        ys = np.rint(_grid(h, oh)).astype(np.int64)
        xs = np.rint(_grid(w, ow)).astype(np.int64)
        out = t.data[:, :, ys][:, :, :, xs]

        def bwd(g):
            gx = np.zeros(t.shape, dtype=g.dtype)
            np.add.at(gx, (slice(None), slice(None), ys[:, None], xs[None, :]), g)
            return (gx,)

        return _apply("resize", (t,), out, bwd)
    raise ValueError(f"resize: unknown mode {mode!r}")


def _grid(in_size, out_size):
    if out_size == 1:
        return np.zeros(1)
    return np.arange(out_size) * ((in_size - 1.0) / (out_size - 1.0))


def aggregate_nodes(sampled, affinity, filters):
    """Message aggregation over sampled node slots.

    m[n,c,h,w] = sum_j affinity[n,j,h,w] * sampled[n,c,j,h,w]
                 * filters[n,j,g(c),h,w]
    where the filter groups g partition the channel axis evenly.
    """
    sampled, affinity, filters = (_as_tensor(sampled), _as_tensor(affinity),
                                  _as_tensor(filters))
    n, c, k, h, w = sampled.shape
    if affinity.shape != (n, k, h, w):
        raise ValueError(f"aggregate_nodes: affinity shape {affinity.shape} "
                         f"does not match sampled {sampled.shape}")
    if filters.ndim != 5 or filters.shape[:2] != (n, k) or filters.shape[3:] != (h, w):
        raise ValueError(f"aggregate_nodes: filters shape {filters.shape} "
                         f"does not match sampled {sampled.shape}")
    g = filters.shape[2]
    if c % g:
        raise ValueError(f"aggregate_nodes: {g} groups do not divide {c} channels")
    out = kernels.aggregate_forward(sampled.data, affinity.data, filters.data)

    def bwd(gm):
        return kernels.aggregate_backward(sampled.data, affinity.data,
                                          filters.data, gm)

    return _apply("aggregate_nodes", (sampled, affinity, filters), out, bwd)
