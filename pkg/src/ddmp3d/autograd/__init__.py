from .tensor import Tensor, Tape, backward, active_tape
from .gradcheck import gradcheck, GradCheckReport
from .tensorio import save_tensor, load_tensor
from . import ops

__all__ = ["Tensor", "Tape", "backward", "active_tape", "gradcheck",
           "GradCheckReport", "save_tensor", "load_tensor", "ops"]
