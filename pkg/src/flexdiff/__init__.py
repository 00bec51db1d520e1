"""flexdiff: residual velocity-diffusion modeling of 2D turbulence fields."""

__version__ = "0.1.0"

from .conditioning import ConditioningContext, Task
from .dataio import Field, Quantity, ResidualSample
from .diffusion import EnsembleStats, ddim_step, ensemble, forward_perturb, sample, velocity_target
from .schedule import CosineSchedule

__all__ = [
    "__version__",
    "ConditioningContext", "Task",
    "Field", "Quantity", "ResidualSample",
    "EnsembleStats", "CosineSchedule",
    "forward_perturb", "velocity_target", "ddim_step", "sample", "ensemble",
]
