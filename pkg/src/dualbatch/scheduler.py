"""Staged training schedules: dual-batch, cyclic progressive, and hybrid.

Training is split into learning-rate stages. In the cyclic and hybrid
schemes each stage is further split into sub-stages that sweep the image
resolution from low to high, restarting the sweep in every stage. Large
batches are sized per resolution from the memory model; the hybrid scheme
also runs the dual-batch planner for each sub-stage.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Mapping, Sequence

from .cost_model import CostModel, cost_at
from .errors import BudgetTooSmall, InconsistentArity, InfeasibleSchedule, OutOfRange, ScheduleError
from .memory_model import MemoryModel, max_batch
from .planner import AllocationPlan, FactorScheme, FleetSpec, baseline_plan, plan


class Scheme(str, enum.Enum):
    DUAL = "dual"
    CYCLIC = "cyclic"
    HYBRID = "hybrid"


@dataclass(frozen=True)
class Warmup:
    start_lr: float
    target_lr: float
    epochs: int

    def to_dict(self) -> dict:
        return {"start_lr": self.start_lr, "target_lr": self.target_lr, "epochs": self.epochs}


@dataclass(frozen=True)
class SubStage:
    first_epoch: int
    last_epoch: int
    resolution: int
    large_batch: int
    dropout_rate: float
    learning_rate: float
    plan: AllocationPlan

    @property
    def epoch_range(self) -> tuple[int, int]:
        return self.first_epoch, self.last_epoch

    @property
    def epochs(self) -> int:
        return self.last_epoch - self.first_epoch + 1

    @property
    def small_batch(self) -> int | None:
        return self.plan.small_batch

    def to_dict(self) -> dict:
        out = {
            "epochs": [self.first_epoch, self.last_epoch],
            "resolution": self.resolution,
            "large_batch": self.large_batch,
            "dropout": self.dropout_rate,
        }
        if self.plan.small_batch is not None:
            out["small_batch"] = self.plan.small_batch
            out["d_small"] = self.plan.d_small
            out["factor_value"] = self.plan.factor_value
        if self.plan.d_large is not None:
            out["d_large"] = self.plan.d_large
        out["plan"] = self.plan.to_dict()
        return out


@dataclass(frozen=True)
class Stage:
    learning_rate: float
    sub_stages: tuple[SubStage, ...]


@dataclass(frozen=True)
class TrainingSchedule:
    scheme: Scheme
    stages: tuple[Stage, ...]
    warmup: Warmup | None = None

    @property
    def sub_stages(self) -> list[SubStage]:
        return [sub for stage in self.stages for sub in stage.sub_stages]

    @property
    def total_epochs(self) -> int:
        return self.stages[-1].sub_stages[-1].last_epoch

    @property
    def resolutions(self) -> list[int]:
        return sorted({sub.resolution for sub in self.sub_stages})

    def lr_at(self, epoch: int) -> float:
        return lr_at(self, epoch)

    def config_at(self, epoch: int) -> SubStage:
        return config_at(self, epoch)

    def stage_index(self, epoch: int) -> int:
        for i, stage in enumerate(self.stages):
            if stage.sub_stages[0].first_epoch <= epoch <= stage.sub_stages[-1].last_epoch:
                return i
        raise OutOfRange(f"epoch {epoch} outside 1..{self.total_epochs}")

    def to_dict(self) -> dict:
        return {
            "scheme": self.scheme.value,
            "warmup": None if self.warmup is None else self.warmup.to_dict(),
            "stages": [
                {
                    "learning_rate": stage.learning_rate,
                    "sub_stages": [sub.to_dict() for sub in stage.sub_stages],
                }
                for stage in self.stages
            ],
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "TrainingSchedule":
        stages = []
        for stage in data["stages"]:
            lr = float(stage["learning_rate"])
            subs = tuple(
                SubStage(
                    first_epoch=int(sub["epochs"][0]),
                    last_epoch=int(sub["epochs"][1]),
                    resolution=int(sub["resolution"]),
                    large_batch=int(sub["large_batch"]),
                    dropout_rate=float(sub["dropout"]),
                    learning_rate=lr,
                    plan=AllocationPlan.from_dict(sub["plan"]),
                )
                for sub in stage["sub_stages"]
            )
            stages.append(Stage(lr, subs))
        warmup = data.get("warmup")
        return cls(
            scheme=Scheme(data["scheme"]),
            stages=tuple(stages),
            warmup=None if warmup is None else Warmup(
                float(warmup["start_lr"]), float(warmup["target_lr"]), int(warmup["epochs"])
            ),
        )


def split_epochs(total: int, parts: int) -> list[int]:
    """Even split, remainder going to the earliest parts."""
    base, extra = divmod(total, parts)
    return [base + (1 if i < extra else 0) for i in range(parts)]


def _validate(stage_epochs, lrs, resolutions, dropout_rates, warmup) -> None:
    if len(stage_epochs) != len(lrs):
        raise InconsistentArity(f"{len(stage_epochs)} stage lengths but {len(lrs)} learning rates")
    if len(resolutions) != len(dropout_rates):
        raise InconsistentArity(f"{len(resolutions)} resolutions but {len(dropout_rates)} dropout rates")
    if not stage_epochs or not resolutions:
        raise InconsistentArity("need at least one stage and one resolution")
    if any(e < 1 for e in stage_epochs):
        raise ScheduleError("every stage needs at least one epoch")
    if any(lr <= 0 for lr in lrs):
        raise ScheduleError("learning rates must be positive")
    if any(b >= a for a, b in zip(lrs, lrs[1:])):
        raise ScheduleError("learning rates must strictly decrease across stages")
    if any(r < 1 for r in resolutions) or any(b <= a for a, b in zip(resolutions, resolutions[1:])):
        raise ScheduleError("resolutions must be positive and strictly increasing")
    if any(not 0.0 <= p < 1.0 for p in dropout_rates):
        raise ScheduleError("dropout rates must lie in [0, 1)")
    if any(b < a for a, b in zip(dropout_rates, dropout_rates[1:])):
        raise ScheduleError("dropout rates must not decrease with resolution")
    if warmup is not None:
        if warmup.epochs < 1 or warmup.epochs > stage_epochs[0]:
            raise ScheduleError("warm-up must fit inside the first stage")
        if warmup.start_lr <= 0 or warmup.target_lr <= 0:
            raise ScheduleError("warm-up learning rates must be positive")


def large_batch_at(
    resolution: int,
    fleet: FleetSpec,
    memory: Mapping[int, MemoryModel] | None,
    memory_budget: float | None,
    caps: Mapping[int, int] | None,
    headroom: float = 0.0,
) -> int:
    """Memory-feasible large batch at ``resolution``, capped by a user ceiling."""
    limits = []
    if memory is not None and memory_budget is not None:
        if resolution not in memory:
            raise InfeasibleSchedule(f"no memory model for resolution {resolution}")
        try:
            limits.append(max_batch(memory[resolution], memory_budget, headroom))
        except BudgetTooSmall as exc:
            raise InfeasibleSchedule(f"resolution {resolution}: {exc}") from exc
    if caps and resolution in caps:
        limits.append(int(caps[resolution]))
    if not limits:
        limits.append(fleet.large_batch)
    best = min(limits)
    if best < 1:
        raise InfeasibleSchedule(f"resolution {resolution} admits no feasible batch")
    return best


def build(
    scheme: Scheme | str,
    stage_epochs: Sequence[int],
    lrs: Sequence[float],
    resolutions: Sequence[int],
    dropout_rates: Sequence[float],
    fleet: FleetSpec,
    cost: CostModel | Mapping[int, CostModel],
    memory: Mapping[int, MemoryModel] | None = None,
    warmup: Warmup | None = None,
    *,
    memory_budget: float | None = None,
    large_batch_caps: Mapping[int, int] | None = None,
    factor_scheme: FactorScheme | str = FactorScheme.RATIO,
    base_resolution: int | None = None,
    headroom: float = 0.0,
) -> TrainingSchedule:
    scheme = Scheme(scheme)
    _validate(stage_epochs, lrs, resolutions, dropout_rates, warmup)
    if fleet.n == 0:
        raise ScheduleError("fleet has no workers")
    base = base_resolution or max(resolutions)

    ladder = list(zip(resolutions, dropout_rates))
    if scheme is Scheme.DUAL:
        ladder = ladder[-1:]

    configs = []
    for resolution, dropout in ladder:
        b_large = large_batch_at(resolution, fleet, memory, memory_budget, large_batch_caps, headroom)
        if scheme is Scheme.CYCLIC:
            alloc = baseline_plan(fleet.n, fleet.total_data, b_large)
        else:
            sub_fleet = FleetSpec(fleet.n_small, fleet.n_large, fleet.total_data, b_large, fleet.k)
            alloc = plan(sub_fleet, cost_at(cost, resolution, base), factor_scheme)
        configs.append((resolution, dropout, b_large, alloc))

    batches = [c[2] for c in configs]
    if any(hi > lo for lo, hi in zip(batches, batches[1:])):
        raise InfeasibleSchedule(f"large batch grows with resolution: {batches}")

    stages = []
    epoch = 1
    for lr, length in zip(lrs, stage_epochs):
        parts = split_epochs(length, len(configs))
        if min(parts) < 1:
            raise InfeasibleSchedule(
                f"stage of {length} epochs cannot hold {len(configs)} sub-stages"
            )
        subs = []
        for (resolution, dropout, b_large, alloc), span in zip(configs, parts):
            subs.append(SubStage(epoch, epoch + span - 1, resolution, b_large, dropout, lr, alloc))
            epoch += span
        stages.append(Stage(lr, tuple(subs)))
    return TrainingSchedule(scheme, tuple(stages), warmup)


def lr_at(schedule: TrainingSchedule, epoch: int) -> float:
    warm = schedule.warmup
    if warm is not None and 0 <= epoch <= warm.epochs:
        return warm.start_lr + (warm.target_lr - warm.start_lr) * epoch / warm.epochs
    return config_at(schedule, epoch).learning_rate


def config_at(schedule: TrainingSchedule, epoch: int) -> SubStage:
    for sub in schedule.sub_stages:
        if sub.first_epoch <= epoch <= sub.last_epoch:
            return sub
    raise OutOfRange(f"epoch {epoch} outside 1..{schedule.total_epochs}")


def format_schedule_table(schedule: TrainingSchedule) -> str:
    """Configuration table: one column per sub-stage, one row per setting."""
    subs = schedule.sub_stages
    stage_of = []
    sub_of = []
    for si, stage in enumerate(schedule.stages, start=1):
        for ji, _ in enumerate(stage.sub_stages, start=1):
            stage_of.append(str(si))
            sub_of.append(str(ji))
    rows = [
        ("stage", stage_of),
        ("sub-stage", sub_of),
        ("epoch", [f"{s.first_epoch}-{s.last_epoch}" for s in subs]),
        ("LR", [f"{s.learning_rate:g}" for s in subs]),
        ("B_S", ["-" if s.small_batch is None else str(s.small_batch) for s in subs]),
        ("B_L", [str(s.large_batch) for s in subs]),
        ("d_S", ["-" if s.plan.d_small is None else str(s.plan.d_small) for s in subs]),
        ("d_L", ["-" if s.plan.d_large is None else str(s.plan.d_large) for s in subs]),
        ("resolution", [str(s.resolution) for s in subs]),
        ("dropout", [f"{s.dropout_rate:g}" for s in subs]),
    ]
    label_w = max(len(name) for name, _ in rows)
    col_w = [max(len(cells[i]) for _, cells in rows) for i in range(len(subs))]
    lines = [f"scheme: {schedule.scheme.value}"]
    if schedule.warmup is not None:
        w = schedule.warmup
        lines.append(f"warm-up: {w.start_lr:g} -> {w.target_lr:g} over {w.epochs} epochs")
    for name, cells in rows:
        lines.append(
            name.ljust(label_w) + " | " + " | ".join(c.rjust(w) for c, w in zip(cells, col_w))
        )
    return "\n".join(lines)
