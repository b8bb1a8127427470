"""Minimal numpy autodiff, CNN layers, Adam and checkpoint I/O."""
from .autodiff import Tensor, no_grad
from .checkpoint import load_checkpoint, save_checkpoint
from .model import Model, ModelSpec, get_spec, parameter_count, student_spec, teacher_spec
from .optim import AdamState, adam_step

__all__ = [
    "AdamState", "Model", "ModelSpec", "Tensor", "adam_step", "get_spec", "load_checkpoint",
    "no_grad", "parameter_count", "save_checkpoint", "student_spec", "teacher_spec",
]
