"""Minimal dense-tensor substrate with reverse-mode gradients."""

from . import ops
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .gradcheck import GradCheckReport, finite_diff_check
from .optim import Adam, AdamState, adam_step
from .tensor import OpRecord, Tape, Tensor, active_tape, as_tensor

__all__ = [
    "ops",
    "Tensor",
    "Tape",
    "OpRecord",
    "active_tape",
    "as_tensor",
    "Adam",
    "AdamState",
    "adam_step",
    "finite_diff_check",
    "GradCheckReport",
    "save_checkpoint",
    "load_checkpoint",
    "CheckpointError",
]
