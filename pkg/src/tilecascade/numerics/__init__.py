from . import functional
from .checkpoint import (META_PREFIX, checkpoint_bytes, load_checkpoint,
                         parse_checkpoint, save_checkpoint)
from .gradcheck import finite_diff_check
from .layers import (AvgPool2, Conv2d, Dense, GroupNorm, SiLU,
                     UpsampleNearest2, fan_in_uniform)
from .store import AdamState, ParamStore, adam_step, clip_global_norm, grad_norm

__all__ = [
    "functional", "ParamStore", "AdamState", "adam_step", "clip_global_norm",
    "grad_norm", "finite_diff_check", "Conv2d", "GroupNorm", "SiLU", "Dense",
    "AvgPool2", "UpsampleNearest2", "fan_in_uniform", "save_checkpoint",
    "load_checkpoint", "parse_checkpoint", "checkpoint_bytes", "META_PREFIX",
]
