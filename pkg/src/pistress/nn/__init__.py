from . import ops
from .checkpoint import export_text, load_checkpoint, save_checkpoint
from .graph import Conv2d, Param, Tape, Var, he_normal
from .optim import Adam, adam_step

__all__ = [
    "ops",
    "Conv2d",
    "Param",
    "Tape",
    "Var",
    "he_normal",
    "Adam",
    "adam_step",
    "save_checkpoint",
    "load_checkpoint",
    "export_text",
]
