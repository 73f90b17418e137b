"""Central-finite-difference verification of the analytic gradients.

Checks always run at 64-bit: 32-bit finite differences are too noisy to
state anything at the tolerances used here.
"""

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tape, Tensor, backward


@dataclass
class InputReport:
    name: str
    max_rel_err: float
    max_abs_err: float


@dataclass
class GradCheckReport:
    max_rel_err: float
    passed: bool
    eps: float
    tol: float
    per_input: list = field(default_factory=list)

    def table(self):
        lines = [f"{'input':<24} {'max rel err':>14} {'max abs err':>14}"]
        for r in self.per_input:
            lines.append(f"{r.name:<24} {r.max_rel_err:>14.3e} {r.max_abs_err:>14.3e}")
        lines.append(f"overall max rel err {self.max_rel_err:.3e} "
                     f"({'PASS' if self.passed else 'FAIL'} at {self.tol:g})")
        return "\n".join(lines)


def _relative_errors(analytic, numeric):
    scale = max(1.0, float(np.max(np.abs(analytic), initial=0.0)),
                float(np.max(np.abs(numeric), initial=0.0)))
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)),
                       1e-3 * scale)
    return np.abs(analytic - numeric) / denom


def gradcheck(fn, inputs, eps=1e-5, tol=1e-4, names=None):
    """Compare analytic gradients of ``fn(*inputs)`` (a scalar) against
    central differences (f(x+eps) - f(x-eps)) / (2 eps), elementwise.

    The relative error denominator is floored at 1e-3 of the gradient
    scale so that near-zero gradient entries are judged on absolute error
    rather than blowing up the ratio. ``fn`` must be deterministic, and
    inputs should sit a margin of ~10*eps away from any non-smooth point
    of ``fn`` (ReLU kinks, bilinear lattice coordinates, pooling ties).
    """
    inputs = list(inputs)
    if names is None:
        names = [f"input{i}" for i in range(len(inputs))]
    for t in inputs:
        if not isinstance(t, Tensor):
            raise TypeError("gradcheck inputs must be Tensors")
        if t.dtype != np.float64:
            raise ValueError("gradcheck requires float64 inputs")
        t.requires_grad = True
        t.grad = None

    with Tape() as tape:
        out = fn(*inputs)
    if not isinstance(out, Tensor) or out.size != 1:
        raise ValueError("gradcheck: fn must return a scalar Tensor")
    backward(tape, out)
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy()
                for t in inputs]
    for t in inputs:
        t.grad = None

    def evaluate():
        v = fn(*inputs)
        return float(v.data.reshape(()))

    reports = []
    worst = 0.0
    for t, a, name in zip(inputs, analytic, names):
        flat = t.data.reshape(-1)
        numeric = np.zeros_like(flat)
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + eps
            fp = evaluate()
            flat[i] = keep - eps
            fm = evaluate()
            flat[i] = keep
            numeric[i] = (fp - fm) / (2.0 * eps)
        numeric = numeric.reshape(t.shape)
        rel = _relative_errors(a, numeric)
        max_rel = float(rel.max(initial=0.0))
        max_abs = float(np.abs(a - numeric).max(initial=0.0))
        reports.append(InputReport(name, max_rel, max_abs))
        worst = max(worst, max_rel)

    return GradCheckReport(max_rel_err=worst, passed=worst < tol,
                           eps=eps, tol=tol, per_input=reports)
