"""Mean-teacher parameter averaging and warm-up gating."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nn import ConfigError, ModelParams


@dataclass(frozen=True)
class TeacherConfig:
    alpha: float = 0.99
    warmup_epochs: int = 20
    ema_granularity: str = "epoch"  # "epoch" or "step"

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError("alpha must lie in [0, 1]")
        if self.warmup_epochs < 0:
            raise ConfigError("warmup_epochs must be >= 0")
        if self.ema_granularity not in ("epoch", "step"):
            raise ConfigError("ema_granularity must be 'epoch' or 'step'")


def ema_update(teacher: ModelParams, student: ModelParams, alpha: float) -> ModelParams:
    """teacher' = alpha * teacher + (1 - alpha) * student, element-wise."""
    if list(teacher.tensors) != list(student.tensors):
        raise ValueError("teacher and student parameter names differ")
    out = {}
    for name, t in teacher.items():
        s = student[name]
        if s.shape != t.shape:
            raise ValueError(f"{name}: teacher {t.shape} vs student {s.shape}")
        if alpha == 1.0:
            out[name] = t.copy()
        elif alpha == 0.0:
            out[name] = s.astype(t.dtype, copy=True)
        else:
            out[name] = (alpha * t.astype(np.float64) + (1.0 - alpha) * s.astype(np.float64)).astype(t.dtype)
    return ModelParams(teacher.config, out)


def gates(epoch: int, config: TeacherConfig) -> tuple[bool, bool]:
    """(update_teacher, apply_src) for a 0-based epoch; both open once epoch >= warm-up."""
    on = epoch >= config.warmup_epochs
    return on, on
