"""Dense tensor with tape-based reverse-mode differentiation.

A ``Tape`` records every primitive applied while it is active (thread-local
stack, so independent tapes can run in parallel threads). ``backward`` walks
the records in reverse, visiting each produced value exactly once, and
accumulates adjoints into ``Tensor.grad``. Data is immutable by convention
after construction except for gradient accumulation.
"""

import threading

import numpy as np

_FLOAT_DTYPES = (np.float32, np.float64)
_tls = threading.local()


def _tape_stack():
    if not hasattr(_tls, "stack"):
        _tls.stack = []
    return _tls.stack


def active_tape():
    """The innermost active Tape on this thread, or None."""
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """N-d real array, the carrier of all features, offsets and affinities.

    The pipeline works in (batch, channels, height, width) layout; lower- or
    higher-rank views appear as intermediates (sampled node stacks are 5-d).
    Values must be finite; construction rejects NaN/Inf rather than letting
    them propagate silently.
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float64)
        if not np.all(np.isfinite(arr)):
            raise ValueError("Tensor holds non-finite values (NaN or Inf)")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.size == 1 else None

    def detach(self):
        return Tensor(self.data.copy(), requires_grad=False)

    def zero_grad(self):
        self.grad = None

    def assert_finite(self, what="tensor"):
        if not np.all(np.isfinite(self.data)):
            raise ValueError(f"{what} holds non-finite values")
        return self

    def __repr__(self):
        head = np.array2string(self.data, precision=4, threshold=8)
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}, data={head})"

    # arithmetic sugar; the real work lives in ops.py
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from . import ops
        return ops.scale(self, -1.0)

    def __truediv__(self, s):
        from . import ops
        if isinstance(s, Tensor):
            raise TypeError("tensor/tensor division is not a primitive; "
                            "divide by a python scalar")
        return ops.scale(self, 1.0 / float(s))

    def sum(self, axis=None, keepdims=False):
        from . import ops
        return ops.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        from . import ops
        return ops.mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        from . import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def transpose(self, *axes):
        from . import ops
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return ops.transpose(self, axes)


class TapeRecord:
    """One primitive application: op name, input/output handles and the
    backward rule closure (which owns any saved intermediates)."""

    __slots__ = ("op", "inputs", "output", "backward_fn")

    def __init__(self, op, inputs, output, backward_fn):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn


class Tape:
    """Ordered record of primitive applications, in topological order."""

    def __init__(self):
        self.records = []
        self._produced = set()

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        stack = _tape_stack()
        assert stack and stack[-1] is self
        stack.pop()
        return False

    def record(self, op, inputs, output, backward_fn):
        self.records.append(TapeRecord(op, inputs, output, backward_fn))
        self._produced.add(id(output))

    def produced(self, tensor):
        return id(tensor) in self._produced

    def __len__(self):
        return len(self.records)


def backward(tape, loss):
    """Reverse sweep: leaves every reachable requires_grad tensor with
    dLoss/dTensor accumulated into ``.grad`` (repeat calls keep adding)."""
    if not isinstance(loss, Tensor) or loss.size != 1:
        raise ValueError("backward expects a scalar loss Tensor, got "
                         f"{getattr(loss, 'shape', type(loss))}")
    if not tape.produced(loss):
        raise ValueError("loss was not produced under this tape")

    adjoint = {}  # id -> [tensor, grad ndarray]

    def accumulate(t, g):
        slot = adjoint.get(id(t))
        if slot is None:
            adjoint[id(t)] = [t, np.array(g, dtype=t.dtype, copy=True)]
        else:
            slot[1] += g

    accumulate(loss, np.ones_like(loss.data))
    for rec in reversed(tape.records):
        slot = adjoint.get(id(rec.output))
        if slot is None:
            continue
        grads = rec.backward_fn(slot[1])
        for inp, g in zip(rec.inputs, grads):
            if g is None or not inp.requires_grad:
                continue
            accumulate(inp, g.reshape(inp.shape))

    for t, g in adjoint.values():
        if t.requires_grad:
            t.grad = g if t.grad is None else t.grad + g
