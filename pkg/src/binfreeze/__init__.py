"""Progressive binarization of neural networks without straight-through estimators."""

from .binarize import MaskedValue, SmoothKind, masked_backward, masked_forward, ste_binarize
from .masking import Mask, Schedule, ScheduleKind, RefreshConfig, finalize, schedule_p, soft_refresh
from .model import ArchSpec, QuantMode, build, forward_deploy, forward_proxy, forward_train
from .progression import Ordering, LayerPhase, ProgressionPlan, blockade_probe, make_plan, phase_of, step_masks
from .training import PlanConfig, Recipe, evaluate, run_training

__version__ = "0.1.0"
