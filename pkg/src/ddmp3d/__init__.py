"""Depth-conditioned dynamic message propagation and the desk-scale
monocular 3D detection pipeline built around it."""

__version__ = "0.1.0"

from .autograd import Tensor, Tape, backward, gradcheck

__all__ = ["Tensor", "Tape", "backward", "gradcheck", "__version__"]
