"""Dual-batch data-parallel training on a parameter server, with cyclic progressive resizing."""

from __future__ import annotations

__version__ = "0.1.0"

from .cost_model import CostModel, TimingSample, fit, predict_exact, predict_simplified
from .memory_model import MemoryModel, MemorySample, fit_memory, max_batch
from .planner import AllocationPlan, FactorScheme, FleetSpec, baseline_plan, plan
from .ps_core import ParameterServer, PushMessage, SyncPolicy, VirtualScheduler
from .scheduler import Scheme, TrainingSchedule, Warmup, build
from .timing_sim import SimReport, compare_baseline, simulate, simulate_plan

__all__ = [
    "__version__",
    "CostModel", "TimingSample", "fit", "predict_exact", "predict_simplified",
    "MemoryModel", "MemorySample", "fit_memory", "max_batch",
    "AllocationPlan", "FactorScheme", "FleetSpec", "baseline_plan", "plan",
    "ParameterServer", "PushMessage", "SyncPolicy", "VirtualScheduler",
    "Scheme", "TrainingSchedule", "Warmup", "build",
    "SimReport", "compare_baseline", "simulate", "simulate_plan",
]
