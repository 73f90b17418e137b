"""Backend selection for the hot numeric kernels.

Two interchangeable implementations exist: numba-jitted loops
(``numba_impl``) and vectorized pure numpy (``numpy_impl``). The active
one is chosen once at import time:

  * ``DDMP3D_KERNELS=numpy``  force the pure-numpy path
  * ``DDMP3D_KERNELS=numba``  force numba (ImportError if unavailable)
  * unset                     numba when importable, else numpy

``benchmarks/bench_kernels.py`` times the two side by side.
"""

import os

from . import numpy_impl

_FUNCTIONS = (
    "conv2d_forward",
    "conv2d_backward",
    "bilinear_forward",
    "bilinear_backward",
    "maxpool_forward",
    "maxpool_backward",
    "resize_bilinear_forward",
    "resize_bilinear_backward",
    "aggregate_forward",
    "aggregate_backward",
)


def _pick_backend():
    choice = os.environ.get("DDMP3D_KERNELS", "").strip().lower()
    if choice == "numpy":
        return "numpy", numpy_impl
    if choice == "numba":
        from . import numba_impl
        return "numba", numba_impl
    if choice:
        raise ValueError(
            f"DDMP3D_KERNELS={choice!r}: expected 'numba' or 'numpy'")
    try:
        from . import numba_impl
        return "numba", numba_impl
    except ImportError:
        return "numpy", numpy_impl


_BACKEND_NAME, _impl = _pick_backend()


def active_backend():
    """Name of the kernel backend selected at import time."""
    return _BACKEND_NAME


def get_backend(name):
    """Fetch a backend module by name ('numba' or 'numpy')."""
    if name == "numpy":
        return numpy_impl
    if name == "numba":
        from . import numba_impl
        return numba_impl
    raise ValueError(f"unknown kernel backend {name!r}")


for _fn in _FUNCTIONS:
    globals()[_fn] = getattr(_impl, _fn)

conv_output_size = numpy_impl.conv_output_size

__all__ = list(_FUNCTIONS) + ["active_backend", "get_backend",
                              "conv_output_size"]
