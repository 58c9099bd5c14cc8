"""Parameter server: versioned global weights, pull/push, BSP/ASP/SSP gating.

Workers pull a snapshot, train one batch locally and push the result. The
server folds each push in as ``factor * (pushed - snapshot)``, applied
serially in arrival order.

Two execution backends share the server. ``VirtualScheduler`` is a
single-threaded event loop in virtual time (batch durations from the cost
model, ties broken by worker id) and is bit-reproducible. The threaded
backend runs one OS thread per worker against the same server.
"""

from __future__ import annotations

import csv
import enum
import heapq
import math
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .cost_model import CostModel, cost_at
from .errors import (
    DeadlockError,
    DimensionMismatch,
    DualBatchError,
    MissingSnapshot,
    RunAborted,
    UnknownWorker,
)
from .scheduler import TrainingSchedule
from . import trainer as tr

TRACE_FIELDS = ["event_index", "virtual_time_s", "worker_id", "event", "version", "iteration"]
METRIC_FIELDS = [
    "epoch", "virtual_time_s", "wall_time_s", "global_version",
    "train_loss", "eval_loss", "eval_accuracy",
]


# --------------------------------------------------------------------------- policy


class PolicyKind(str, enum.Enum):
    BSP = "bsp"
    ASP = "asp"
    SSP = "ssp"


@dataclass(frozen=True)
class SyncPolicy:
    kind: PolicyKind
    staleness: int | None = None  # None means unbounded

    def __post_init__(self):
        object.__setattr__(self, "kind", PolicyKind(self.kind))
        if self.staleness is not None and self.staleness < 0:
            raise ValueError("staleness must be non-negative")

    @classmethod
    def bsp(cls) -> "SyncPolicy":
        return cls(PolicyKind.BSP, 0)

    @classmethod
    def asp(cls) -> "SyncPolicy":
        return cls(PolicyKind.ASP, None)

    @classmethod
    def ssp(cls, staleness: int | None) -> "SyncPolicy":
        return cls(PolicyKind.SSP, staleness)

    @classmethod
    def parse(cls, kind: str, staleness: int | None = None) -> "SyncPolicy":
        kind = PolicyKind(kind.lower())
        if kind is PolicyKind.BSP:
            return cls.bsp()
        if kind is PolicyKind.ASP:
            return cls.asp()
        return cls.ssp(staleness)

    @property
    def bound(self) -> int | None:
        """Effective staleness: 0 for BSP, None (unbounded) for ASP."""
        if self.kind is PolicyKind.BSP:
            return 0
        if self.kind is PolicyKind.ASP:
            return None
        return self.staleness

    def allows(self, lead: int) -> bool:
        """May a worker that is ``lead`` iterations ahead of the slowest start another?

        A pull is allowed while ``lead < s``; ``s = 0`` is treated as ``s = 1``
        so that the slowest worker can always move, which is lockstep.
        """
        s = self.bound
        return s is None or lead < max(s, 1)

    def __str__(self) -> str:
        if self.kind is PolicyKind.SSP:
            return f"ssp({'inf' if self.staleness is None else self.staleness})"
        return self.kind.value


# --------------------------------------------------------------------------- server


@dataclass(frozen=True)
class PushMessage:
    worker_id: int
    base_version: int
    updated_weights: np.ndarray
    factor: float = 1.0
    samples_processed: int = 0

    def __post_init__(self):
        if not 0.0 < self.factor <= 1.0:
            raise ValueError(f"factor must lie in (0, 1], got {self.factor}")


@dataclass
class _Snapshot:
    version: int
    weights: np.ndarray


class ParameterServer:
    """Thread-safe global model with SSP gating on completed iterations."""

    def __init__(self, weights: np.ndarray, policy: SyncPolicy, deadlock_timeout: float = 60.0):
        self._weights = np.array(weights, dtype=np.float64, copy=True)
        self.policy = policy
        self.version = 0
        self.deadlock_timeout = deadlock_timeout
        self._cond = threading.Condition()
        self._snapshots: dict[int, _Snapshot] = {}
        self._completed: dict[int, int] = {}
        self._active: set[int] = set()
        self._aborted: BaseException | None = None
        self.pushes = 0

    # registration and rounds ------------------------------------------------

    def register(self, worker_id: int) -> None:
        with self._cond:
            self._completed.setdefault(worker_id, 0)
            self._active.add(worker_id)

    @property
    def workers(self) -> list[int]:
        return sorted(self._completed)

    def begin_round(self) -> None:
        """Start an epoch: iteration counts reset and every worker is active again."""
        with self._cond:
            for w in self._completed:
                self._completed[w] = 0
            self._active = set(self._completed)
            self._cond.notify_all()

    def retire(self, worker_id: int) -> None:
        """Worker has finished its shard for this round; it no longer holds others back."""
        with self._cond:
            self._check(worker_id)
            self._active.discard(worker_id)
            self._cond.notify_all()

    def abort(self, reason: BaseException) -> None:
        with self._cond:
            self._aborted = reason
            self._cond.notify_all()

    def _check(self, worker_id: int) -> None:
        if worker_id not in self._completed:
            raise UnknownWorker(worker_id)

    # progress ---------------------------------------------------------------

    def completed(self, worker_id: int) -> int:
        return self._completed[worker_id]

    def _min_active(self) -> int:
        return min((self._completed[w] for w in self._active), default=0)

    def lead(self, worker_id: int) -> int:
        with self._cond:
            self._check(worker_id)
            return self._completed[worker_id] - self._min_active()

    def gap(self) -> int:
        """Fastest completed count minus the slowest still-active worker's."""
        with self._cond:
            if not self._active:
                return 0
            return max(self._completed.values()) - self._min_active()

    def can_pull(self, worker_id: int) -> bool:
        with self._cond:
            self._check(worker_id)
            return self.policy.allows(self._completed[worker_id] - self._min_active())

    # protocol ---------------------------------------------------------------

    def pull(self, worker_id: int, timeout: float | None = None) -> tuple[int, np.ndarray]:
        with self._cond:
            self._check(worker_id)
            limit = self.deadlock_timeout if timeout is None else timeout

            def ready():
                return self._aborted is not None or self.policy.allows(
                    self._completed[worker_id] - self._min_active()
                )

            if not self._cond.wait_for(ready, timeout=limit):
                raise DeadlockError(
                    f"worker {worker_id} waited {limit}s at lead "
                    f"{self._completed[worker_id] - self._min_active()} under {self.policy}"
                )
            if self._aborted is not None:
                raise RunAborted(f"run aborted: {self._aborted!r}")
            snap = _Snapshot(self.version, self._weights.copy())
            self._snapshots[worker_id] = snap
            return snap.version, snap.weights.copy()

    def push(self, msg: PushMessage) -> int:
        with self._cond:
            self._check(msg.worker_id)
            pushed = np.asarray(msg.updated_weights, dtype=np.float64)
            if pushed.shape != self._weights.shape:
                raise DimensionMismatch(
                    f"pushed shape {pushed.shape} != global shape {self._weights.shape}"
                )
            snap = self._snapshots.get(msg.worker_id)
            if snap is None or snap.version != msg.base_version:
                raise MissingSnapshot(
                    f"worker {msg.worker_id} has no snapshot at version {msg.base_version}"
                )
            if msg.factor == 1.0 and snap.version == self.version:
                # nothing landed since the pull: the delta form is plain replacement
                self._weights = pushed.copy()
            else:
                self._weights += msg.factor * (pushed - snap.weights)
            del self._snapshots[msg.worker_id]
            self.version += 1
            self.pushes += 1
            self._completed[msg.worker_id] += 1
            self._cond.notify_all()
            return self.version

    def weights(self) -> np.ndarray:
        with self._cond:
            return self._weights.copy()


# --------------------------------------------------------------------------- traces


@dataclass(frozen=True)
class TraceEvent:
    event_index: int
    virtual_time_s: float
    worker_id: int
    event: str  # pull | push | block | unblock
    version: int
    iteration: int

    def row(self) -> list:
        return [self.event_index, repr(float(self.virtual_time_s)), self.worker_id,
                self.event, self.version, self.iteration]


def write_trace_csv(path: str | Path, events: Iterable[TraceEvent]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(TRACE_FIELDS)
        for e in events:
            writer.writerow(e.row())


def read_trace_csv(path: str | Path) -> list[TraceEvent]:
    with open(path, newline="") as fh:
        return [
            TraceEvent(int(r["event_index"]), float(r["virtual_time_s"]), int(r["worker_id"]),
                       r["event"], int(r["version"]), int(r["iteration"]))
            for r in csv.DictReader(fh)
        ]


def push_sequence(events: Iterable[TraceEvent]) -> list[tuple[int, int]]:
    return [(e.worker_id, e.version) for e in events if e.event == "push"]


# --------------------------------------------------------------------------- virtual backend


StepFn = Callable[[int, np.ndarray], np.ndarray]


@dataclass
class WorkerTask:
    """One worker's work for one round: a batch duration and optional step per iteration."""

    worker_id: int
    durations: Sequence[float]
    factor: float = 1.0
    step: StepFn | None = None
    samples: Sequence[int] | None = None

    @property
    def iterations(self) -> int:
        return len(self.durations)


@dataclass(frozen=True)
class RoundResult:
    start: float
    finish: dict[int, float]  # per-worker completion time
    blocked: dict[int, float]  # SSP wait time
    barrier_wait: dict[int, float]  # time spent waiting for the round to close

    @property
    def makespan(self) -> float:
        return max(self.finish.values(), default=self.start) - self.start

    @property
    def end(self) -> float:
        return max(self.finish.values(), default=self.start)


class VirtualScheduler:
    """Deterministic event loop over a ParameterServer in virtual time."""

    _PULL, _PUSH = 0, 1

    def __init__(self, server: ParameterServer, comm_time: float = 0.0,
                 on_push: Callable[[int, int, np.ndarray], None] | None = None):
        if comm_time < 0:
            raise ValueError("comm_time must be non-negative")
        self.server = server
        self.comm_time = comm_time
        self.on_push = on_push
        self.now = 0.0
        self.trace: list[TraceEvent] = []
        self.gap_trace: list[tuple[float, int]] = []

    def _emit(self, t: float, worker_id: int, kind: str, iteration: int) -> None:
        self.trace.append(
            TraceEvent(len(self.trace), t, worker_id, kind, self.server.version, iteration)
        )

    def run_round(self, tasks: Sequence[WorkerTask]) -> RoundResult:
        server = self.server
        for task in tasks:
            server.register(task.worker_id)
        server.begin_round()
        start = self.now
        by_id = {t.worker_id: t for t in tasks}
        heap: list[tuple[float, int, int, int]] = []
        seq = 0
        finish: dict[int, float] = {}
        blocked_since: dict[int, float] = {}
        blocked = {t.worker_id: 0.0 for t in tasks}
        pending: dict[int, tuple[int, np.ndarray | None]] = {}

        def schedule(t, wid, kind):
            nonlocal seq
            heapq.heappush(heap, (t, wid, seq, kind))
            seq += 1

        for task in tasks:
            if task.iterations == 0:
                server.retire(task.worker_id)
                finish[task.worker_id] = start
            else:
                schedule(start, task.worker_id, self._PULL)

        def wake(t):
            for wid in sorted(blocked_since):
                if server.can_pull(wid):
                    self._emit(t, wid, "unblock", server.completed(wid) + 1)
                    blocked[wid] += t - blocked_since.pop(wid)
                    schedule(t, wid, self._PULL)

        while heap:
            t, wid, _, kind = heapq.heappop(heap)
            task = by_id[wid]
            done = server.completed(wid)
            if kind == self._PULL:
                if not server.can_pull(wid):
                    self._emit(t, wid, "block", done + 1)
                    blocked_since[wid] = t
                    continue
                version, weights = server.pull(wid, timeout=0.0)
                self._emit(t, wid, "pull", done + 1)
                updated = task.step(done, weights) if task.step is not None else weights
                pending[wid] = (version, updated)
                schedule(t + task.durations[done] + self.comm_time, wid, self._PUSH)
            else:
                version, updated = pending.pop(wid)
                samples = task.samples[done] if task.samples is not None else 0
                new_version = server.push(PushMessage(wid, version, updated, task.factor, samples))
                self._emit(t, wid, "push", done + 1)
                if self.on_push is not None:
                    self.on_push(wid, new_version, server._weights)
                if done + 1 < task.iterations:
                    schedule(t, wid, self._PULL)
                else:
                    server.retire(wid)
                    finish[wid] = t
                self.gap_trace.append((t, server.gap()))
                wake(t)
        if blocked_since:
            raise DeadlockError(f"workers {sorted(blocked_since)} blocked with no runnable work")
        end = max(finish.values(), default=start)
        self.now = end
        wait = {wid: end - f for wid, f in finish.items()}
        return RoundResult(start, finish, blocked, wait)


# --------------------------------------------------------------------------- threaded backend


def run_threaded_round(server: ParameterServer, tasks: Sequence[WorkerTask],
                       timeout: float = 60.0) -> RoundResult:
    """Run one round with a thread per worker; wall-clock times are recorded."""
    for task in tasks:
        server.register(task.worker_id)
    server.begin_round()
    start = time.perf_counter()
    finish: dict[int, float] = {}
    blocked = {t.worker_id: 0.0 for t in tasks}
    errors: list[BaseException] = []
    barrier = threading.Barrier(len(tasks))

    def body(task: WorkerTask):
        wid = task.worker_id
        try:
            for i in range(task.iterations):
                before = time.perf_counter()
                version, weights = server.pull(wid, timeout=timeout)
                blocked[wid] += time.perf_counter() - before
                updated = task.step(i, weights) if task.step is not None else weights
                samples = task.samples[i] if task.samples is not None else 0
                server.push(PushMessage(wid, version, updated, task.factor, samples))
            server.retire(wid)
            finish[wid] = time.perf_counter() - start
        except BaseException as exc:  # noqa: BLE001 - surfaced to the caller below
            errors.append(exc)
            server.abort(exc)
            barrier.abort()
            return
        try:
            barrier.wait(timeout=timeout)
        except threading.BrokenBarrierError:
            pass

    threads = [threading.Thread(target=body, args=(t,), daemon=True) for t in tasks]
    for th in threads:
        th.start()
    for th in threads:
        th.join()
    if errors:
        first = next((e for e in errors if not isinstance(e, RunAborted)), errors[0])
        raise first
    if len(finish) != len(tasks):
        raise DeadlockError("epoch barrier timed out")
    end = max(finish.values(), default=0.0)
    return RoundResult(0.0, finish, blocked, {w: end - f for w, f in finish.items()})


def barrier_epoch_end(server: ParameterServer) -> None:
    """Close a round: every worker must have retired before the next one starts."""
    with server._cond:
        if server._active:
            raise DeadlockError(f"workers {sorted(server._active)} still running at epoch end")
        if server._snapshots:
            raise DeadlockError(f"workers {sorted(server._snapshots)} hold unpushed snapshots")


# --------------------------------------------------------------------------- training run


@dataclass(frozen=True)
class MetricsRow:
    epoch: int
    virtual_time_s: float
    wall_time_s: float
    global_version: int
    train_loss: float
    eval_loss: float
    eval_accuracy: float

    def row(self) -> list:
        return [self.epoch] + [
            repr(float(getattr(self, f))) if f != "global_version" else self.global_version
            for f in METRIC_FIELDS[1:]
        ]


@dataclass
class MetricsLog:
    rows: list[MetricsRow] = field(default_factory=list)

    def append(self, row: MetricsRow) -> None:
        self.rows.append(row)

    def __len__(self) -> int:
        return len(self.rows)

    def to_csv(self) -> str:
        lines = [",".join(METRIC_FIELDS)]
        lines.extend(",".join(str(c) for c in r.row()) for r in self.rows)
        return "\n".join(lines) + "\n"

    def write_csv(self, path: str | Path) -> None:
        Path(path).write_text(self.to_csv())

    @classmethod
    def read_csv(cls, path: str | Path) -> "MetricsLog":
        log = cls()
        with open(path, newline="") as fh:
            for r in csv.DictReader(fh):
                log.append(MetricsRow(
                    int(r["epoch"]), float(r["virtual_time_s"]), float(r["wall_time_s"]),
                    int(r["global_version"]), float(r["train_loss"]),
                    float(r["eval_loss"]), float(r["eval_accuracy"]),
                ))
        return log


@dataclass(frozen=True)
class WorkerConfig:
    worker_id: int
    role: str  # "large" or "small"


@dataclass
class TrainJob:
    net: tr.ConvNet
    train: tr.SyntheticDataset
    eval: tr.SyntheticDataset
    cost: CostModel | Mapping[int, CostModel] = field(default_factory=lambda: CostModel(1e-4, 1e-2))
    base_resolution: int | None = None
    init_seed: int | None = None


@dataclass
class RunResult:
    log: MetricsLog
    weights: np.ndarray
    trace: list[TraceEvent]
    gap_trace: list[tuple[float, int]]
    idle: dict[int, float]
    trajectory: list[np.ndarray] | None = None


def workers_for(schedule: TrainingSchedule) -> list[WorkerConfig]:
    plan = schedule.sub_stages[0].plan
    return [WorkerConfig(i, role) for i, role in enumerate(plan.roles())]


def epoch_tasks(job: TrainJob, schedule: TrainingSchedule, workers: Sequence[WorkerConfig],
                epoch: int, seed: int, losses: list[tuple[float, int]]) -> list[WorkerTask]:
    """Per-worker batches, SGD steps and virtual durations for one epoch."""
    sub = schedule.config_at(epoch)
    alloc = sub.plan
    roles = alloc.roles()
    if len(roles) != len(workers):
        raise ValueError(f"plan has {len(roles)} workers, run has {len(workers)}")
    lr = schedule.lr_at(epoch)
    images = job.train.at_resolution(sub.resolution)
    labels = job.train.labels
    base = job.base_resolution or max(schedule.resolutions)
    cost = cost_at(job.cost, sub.resolution, base)
    net = job.net
    tasks = []
    for wc, part in zip(workers, tr.shard(len(job.train), alloc, epoch=epoch, seed=seed)):
        if wc.role != part.role:
            raise ValueError(f"worker {wc.worker_id} is {wc.role} but the plan says {part.role}")
        chunks = list(tr.batches(part.indices, alloc.batch_for(part.role)))
        rng = tr.worker_rng(seed, wc.worker_id, epoch)

        def step(i, weights, chunks=chunks, rng=rng):
            idx = chunks[i]
            loss, grad = net.loss_and_grad(weights, images[idx], labels[idx], sub.dropout_rate, rng)
            losses.append((loss, len(idx)))
            return tr.sgd_step(weights, grad, lr)

        tasks.append(WorkerTask(
            wc.worker_id,
            [cost.batch_time(len(c)) for c in chunks],
            alloc.factor_for(part.role),
            step,
            [len(c) for c in chunks],
        ))
    return tasks


def run(
    job: TrainJob,
    policy: SyncPolicy,
    schedule: TrainingSchedule,
    epochs: int,
    seed: int,
    workers: Sequence[WorkerConfig] | None = None,
    deterministic: bool = True,
    comm_time: float = 0.0,
    record_trajectory: bool = False,
    deadlock_timeout: float = 60.0,
    on_epoch: Callable[[MetricsRow], None] | None = None,
) -> RunResult:
    """Train ``epochs`` epochs through the parameter server.

    Every epoch ends at a barrier, so a resolution change never overlaps with
    batches of the previous resolution. In deterministic mode ``wall_time_s``
    is written as NaN to keep the log byte-reproducible.
    """
    if epochs < 1:
        raise ValueError("epochs must be >= 1")
    if epochs > schedule.total_epochs:
        raise ValueError(f"schedule covers {schedule.total_epochs} epochs, asked for {epochs}")
    workers = list(workers) if workers is not None else workers_for(schedule)
    if not workers:
        raise ValueError("at least one worker is required")
    init_seed = seed if job.init_seed is None else job.init_seed
    server = ParameterServer(job.net.init_params(init_seed), policy, deadlock_timeout)
    trajectory: list[np.ndarray] | None = [] if record_trajectory else None

    def on_push(_wid, _version, weights):
        if trajectory is not None:
            trajectory.append(weights.copy())

    loop = VirtualScheduler(server, comm_time, on_push)
    log = MetricsLog()
    idle = {w.worker_id: 0.0 for w in workers}
    eval_images = job.eval.at_resolution(job.eval.base_resolution)
    wall_start = time.perf_counter()
    virtual = 0.0
    for epoch in range(1, epochs + 1):
        losses: list[tuple[float, int]] = []
        try:
            tasks = epoch_tasks(job, schedule, workers, epoch, seed, losses)
            if deterministic:
                result = loop.run_round(tasks)
                virtual = loop.now
            else:
                before = server.version
                result = run_threaded_round(server, tasks, deadlock_timeout)
                virtual = math.nan
                if trajectory is not None and server.version != before:
                    trajectory.append(server.weights())
            barrier_epoch_end(server)
            weights = server.weights()
            eval_loss, eval_acc = job.net.evaluate(weights, eval_images, job.eval.labels)
        except DualBatchError as exc:
            if isinstance(exc, RunAborted):
                exc.metrics = log
                raise
            raise RunAborted(f"epoch {epoch}: {exc}", log) from exc
        except Exception as exc:
            raise RunAborted(f"epoch {epoch}: {exc!r}", log) from exc
        for wid in idle:
            idle[wid] += result.blocked.get(wid, 0.0) + result.barrier_wait.get(wid, 0.0)
        seen = sum(n for _, n in losses)
        train_loss = sum(l * n for l, n in losses) / seen if seen else math.nan
        row = MetricsRow(
            epoch, virtual, math.nan if deterministic else time.perf_counter() - wall_start,
            server.version, train_loss, eval_loss, eval_acc,
        )
        log.append(row)
        if on_epoch is not None:
            on_epoch(row)
    return RunResult(log, server.weights(), loop.trace, loop.gap_trace, idle, trajectory)
