"""Event-driven replay of a schedule through the cost model, without training.

Each worker's epoch is a sequence of batches whose durations come from
``a * len(batch) + b`` at the sub-stage's resolution; the final short batch
is charged for the samples it actually holds. The replay runs on the same
server and event loop as real training, with a one-element weight vector.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .cost_model import CostModel, cost_at
from .planner import AllocationPlan, FleetSpec
from .ps_core import (
    ParameterServer,
    SyncPolicy,
    TraceEvent,
    VirtualScheduler,
    WorkerTask,
    write_trace_csv,
)
from .scheduler import TrainingSchedule


@dataclass(frozen=True)
class SimEvent:
    virtual_time: float
    worker_id: int
    kind: str  # batch_done | epoch_done | block | unblock
    iteration: int


def batch_sizes(data_amount: int, batch_size: int) -> list[int]:
    full, rest = divmod(data_amount, batch_size)
    return [batch_size] * full + ([rest] if rest else [])


def worker_tasks(alloc: AllocationPlan, cost: CostModel) -> list[WorkerTask]:
    tasks = []
    for wid, role in enumerate(alloc.roles()):
        sizes = batch_sizes(alloc.data_for(role), alloc.batch_for(role))
        tasks.append(WorkerTask(
            wid, [cost.batch_time(s) for s in sizes], alloc.factor_for(role), None, sizes,
        ))
    return tasks


@dataclass
class SimReport:
    policy: str
    epoch_finish: list[dict[int, float]]  # per epoch, worker -> completion time since epoch start
    epoch_makespan: list[float]
    epoch_stage: list[int]
    roles: list[list[str]]
    blocked: dict[int, float]
    barrier_wait: dict[int, float]
    gap_trace: list[tuple[float, int]]
    trace: list[TraceEvent] = field(repr=False, default_factory=list)

    @property
    def total_makespan(self) -> float:
        return float(sum(self.epoch_makespan))

    @property
    def idle(self) -> dict[int, float]:
        return {w: self.blocked[w] + self.barrier_wait[w] for w in self.blocked}

    @property
    def max_gap(self) -> int:
        return max((g for _, g in self.gap_trace), default=0)

    def class_times(self, epoch_index: int = 0) -> dict[str, float]:
        """Latest completion per worker class in one epoch (0-based index)."""
        out: dict[str, float] = {}
        for wid, t in self.epoch_finish[epoch_index].items():
            role = self.roles[epoch_index][wid]
            out[role] = max(out.get(role, 0.0), t)
        return out

    def class_spread(self, epoch_index: int = 0) -> float:
        times = self.class_times(epoch_index).values()
        return max(times) - min(times)

    def events(self) -> list[SimEvent]:
        """Trace in simulator vocabulary: pushes become batch completions."""
        out = []
        last = {}
        for e in self.trace:
            if e.event == "push":
                out.append(SimEvent(e.virtual_time_s, e.worker_id, "batch_done", e.iteration))
                last[e.worker_id] = e
            elif e.event in ("block", "unblock"):
                out.append(SimEvent(e.virtual_time_s, e.worker_id, e.event, e.iteration))
        return out

    def to_dict(self) -> dict:
        return {
            "policy": self.policy,
            "total_makespan": self.total_makespan,
            "epoch_makespan": self.epoch_makespan,
            "epoch_stage": self.epoch_stage,
            "epoch_finish": [{str(w): t for w, t in f.items()} for f in self.epoch_finish],
            "roles": self.roles,
            "idle": {str(w): t for w, t in self.idle.items()},
            "blocked": {str(w): t for w, t in self.blocked.items()},
            "barrier_wait": {str(w): t for w, t in self.barrier_wait.items()},
            "max_gap": self.max_gap,
        }

    def write(self, json_path: str | Path, trace_path: str | Path | None = None) -> None:
        Path(json_path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")
        if trace_path is not None:
            write_trace_csv(trace_path, self.trace)


def _replay(rounds: Sequence[tuple[AllocationPlan, CostModel, int]], policy: SyncPolicy,
            comm_time: float) -> SimReport:
    n = rounds[0][0].n
    server = ParameterServer(np.zeros(1), policy)
    loop = VirtualScheduler(server, comm_time)
    finish, makespan, stages, roles = [], [], [], []
    blocked = {w: 0.0 for w in range(n)}
    wait = {w: 0.0 for w in range(n)}
    for alloc, cost, stage in rounds:
        if alloc.n != n:
            raise ValueError("every round must use the same number of workers")
        result = loop.run_round(worker_tasks(alloc, cost))
        finish.append({w: t - result.start for w, t in sorted(result.finish.items())})
        makespan.append(result.makespan)
        stages.append(stage)
        roles.append(alloc.roles())
        for w in range(n):
            blocked[w] += result.blocked[w]
            wait[w] += result.barrier_wait[w]
    return SimReport(str(policy), finish, makespan, stages, roles, blocked, wait,
                     loop.gap_trace, loop.trace)


def simulate(
    schedule: TrainingSchedule,
    cost: CostModel | Mapping[int, CostModel],
    policy: SyncPolicy | None = None,
    epochs: int | None = None,
    comm_time: float = 0.0,
    base_resolution: int | None = None,
) -> SimReport:
    """Replay ``epochs`` epochs of ``schedule`` (all of it by default)."""
    policy = policy or SyncPolicy.asp()
    epochs = schedule.total_epochs if epochs is None else epochs
    if not 1 <= epochs <= schedule.total_epochs:
        raise ValueError(f"epochs must be in 1..{schedule.total_epochs}")
    base = base_resolution or max(schedule.resolutions)
    rounds = []
    for epoch in range(1, epochs + 1):
        sub = schedule.config_at(epoch)
        rounds.append((sub.plan, cost_at(cost, sub.resolution, base), schedule.stage_index(epoch)))
    return _replay(rounds, policy, comm_time)


def simulate_plan(alloc: AllocationPlan, cost: CostModel, policy: SyncPolicy | None = None,
                  epochs: int = 1, comm_time: float = 0.0) -> SimReport:
    """Replay a single allocation for ``epochs`` identical epochs."""
    return _replay([(alloc, cost, 0)] * epochs, policy or SyncPolicy.asp(), comm_time)


@dataclass(frozen=True)
class Comparison:
    total_a: float
    total_b: float
    stage_ratios: list[float]

    @property
    def ratio(self) -> float:
        return self.total_a / self.total_b

    @property
    def reduction(self) -> float:
        return 1.0 - self.ratio

    def to_dict(self) -> dict:
        return {"total_a": self.total_a, "total_b": self.total_b, "ratio": self.ratio,
                "reduction": self.reduction, "stage_ratios": self.stage_ratios}


def _stage_totals(report: SimReport) -> list[float]:
    totals: dict[int, float] = {}
    for stage, span in zip(report.epoch_stage, report.epoch_makespan):
        totals[stage] = totals.get(stage, 0.0) + span
    return [totals[s] for s in sorted(totals)]


def compare_reports(a: SimReport, b: SimReport) -> Comparison:
    sa, sb = _stage_totals(a), _stage_totals(b)
    ratios = [x / y for x, y in zip(sa, sb)] if len(sa) == len(sb) else []
    return Comparison(a.total_makespan, b.total_makespan, ratios)


def compare_baseline(
    schedule_a: TrainingSchedule,
    schedule_b: TrainingSchedule,
    cost: CostModel | Mapping[int, CostModel],
    policy: SyncPolicy | None = None,
    comm_time: float = 0.0,
    base_resolution: int | None = None,
) -> Comparison:
    """Makespan of ``schedule_a`` relative to ``schedule_b``, per stage and in total."""
    base = base_resolution or max(schedule_a.resolutions + schedule_b.resolutions)
    a = simulate(schedule_a, cost, policy, comm_time=comm_time, base_resolution=base)
    b = simulate(schedule_b, cost, policy, comm_time=comm_time, base_resolution=base)
    return compare_reports(a, b)


def plan_vs_baseline(fleet: FleetSpec, alloc: AllocationPlan, cost: CostModel,
                     baseline: AllocationPlan, policy: SyncPolicy | None = None) -> float:
    """Epoch makespan of ``alloc`` over that of ``baseline`` for the same fleet."""
    if baseline.n != fleet.n or alloc.n != fleet.n:
        raise ValueError("plans and fleet disagree on worker count")
    mine = simulate_plan(alloc, cost, policy).epoch_makespan[0]
    ref = simulate_plan(baseline, cost, policy).epoch_makespan[0]
    return mine / ref
