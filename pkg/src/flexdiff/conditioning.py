"""Per-sample conditioning: task tag, conditioning snapshots, scalar context."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .errors import ContextError

__all__ = ["Task", "ConditioningContext", "context_vector", "CONTEXT_DIM"]

# Normalizers for the scalar context entries. The forecast step index is
# scaled against the longest rollout horizon exercised anywhere (50 steps);
# the upsample factor against the largest supported factor (2^3 = 8).
MAX_FORECAST_STEP = 50
CONTEXT_DIM = 3


class Task(str, Enum):
    SR = "sr"
    FC = "fc"


@dataclass
class ConditioningContext:
    """Auxiliary inputs for one sample.

    For super-resolution the single snapshot is the bicubic-upsampled
    low-resolution field at target resolution; for forecasting the two
    snapshots are the two most recent frames (oldest first). Snapshots are
    expected in normalized units (same constants as the residuals).
    """

    task: Task
    snapshots: tuple[np.ndarray, ...]
    re_tag: float = 0.0
    step_index: int = 1
    upsample_factor: int = 1
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        self.task = Task(self.task)
        self.snapshots = tuple(np.asarray(s) for s in self.snapshots)
        if self.task is Task.SR and len(self.snapshots) != 1:
            raise ContextError("SR context must carry exactly one snapshot")
        if self.task is Task.FC and len(self.snapshots) != 2:
            raise ContextError("FC context must carry exactly two snapshots")
        shapes = {s.shape for s in self.snapshots}
        if len(shapes) != 1:
            raise ContextError(f"conditioning snapshots disagree in shape: {shapes}")
        if not math.isfinite(self.re_tag):
            raise ContextError("re_tag must be finite")
        if self.upsample_factor < 1:
            raise ContextError("upsample_factor must be >= 1")
        if self.step_index < 1:
            raise ContextError("step_index must be >= 1")

    @property
    def spatial_shape(self) -> tuple[int, int]:
        return self.snapshots[0].shape[-2:]


def context_vector(ctx: ConditioningContext) -> np.ndarray:
    """Encode the scalar conditioning variables as a fixed-length vector.

    Entries: normalized log-Reynolds, forecast step fraction (FC only),
    log2 of the upsample factor over 3 (SR only). Inapplicable fields are
    zero-filled.
    """
    re_term = math.log10(max(ctx.re_tag, 1.0)) / 5.0
    step_term = ctx.step_index / MAX_FORECAST_STEP if ctx.task is Task.FC else 0.0
    up_term = math.log2(ctx.upsample_factor) / 3.0 if ctx.task is Task.SR else 0.0
    return np.array([re_term, step_term, up_term], dtype=np.float32)
