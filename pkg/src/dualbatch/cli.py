"""Command-line entry point: profile, plan, schedule, train, simulate, max-batch.

Configuration is one JSON document; flags override file values, which
override defaults. Every artifact is written atomically under the output
root (``--out``, else ``$DUALBATCH_OUT``, else ``./dualbatch_out``).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import math
import os
import sys
import tempfile
import time
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import __version__
from . import cost_model as cm
from . import memory_model as mm
from . import planner as pl
from . import ps_core as ps
from . import scheduler as sc
from . import timing_sim as sim
from . import trainer as tr
from .errors import ConfigError, DualBatchError

log = logging.getLogger("dualbatch")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3


# --------------------------------------------------------------------------- config


@dataclass
class RunConfig:
    seed: int = 0
    # synthetic data
    n_train: int = 600
    n_eval: int = 300
    classes: int = 3
    r_max: int = 32
    noise: float = 0.1
    contrast: float = 5.0
    # fleet and plan
    n_small: int = 3
    n_large: int = 1
    k: float = 1.05
    total_data: int | None = None  # defaults to n_train
    large_batch: int = 16
    factor_scheme: str = "ratio"
    cost: dict = field(default_factory=lambda: {"a": 2e-4, "b": 4e-3})
    cost_path: str | None = None
    base_resolution: int | None = None
    # synchronization
    policy: str = "asp"
    staleness: int | None = None
    comm_time: float = 0.0
    deterministic: bool = True
    # schedule
    scheme: str = "hybrid"
    stage_epochs: list = field(default_factory=lambda: [14, 10, 6])
    lrs: list = field(default_factory=lambda: [0.2, 0.1, 0.03])
    resolutions: list = field(default_factory=lambda: [16, 32])
    dropout_rates: list = field(default_factory=lambda: [0.0, 0.1])
    warmup: dict | None = None
    epochs: int | None = None
    memory_budget: float | None = None  # MiB
    memory_path: str | None = None
    headroom: float = 0.0
    large_batch_caps: dict | None = field(default_factory=lambda: {"16": 16, "32": 16})
    # profiling
    profile_batch_sizes: list = field(default_factory=lambda: [8, 16, 32, 64])
    memory_batch_sizes: list = field(default_factory=lambda: [64, 128, 192, 256, 320, 384, 448, 512])
    repeats: int = 3
    out: str | None = None

    # derived -------------------------------------------------------------

    @property
    def data_size(self) -> int:
        return self.total_data if self.total_data is not None else self.n_train

    @property
    def caps(self) -> dict[int, int] | None:
        if not self.large_batch_caps:
            return None
        return {int(r): int(b) for r, b in self.large_batch_caps.items()}

    def fleet(self) -> pl.FleetSpec:
        return pl.FleetSpec(self.n_small, self.n_large, self.data_size, self.large_batch, self.k)

    def policy_obj(self) -> ps.SyncPolicy:
        return ps.SyncPolicy.parse(self.policy, self.staleness)

    def cost_obj(self) -> cm.CostModel:
        if self.cost_path:
            return cm.load_model(self.cost_path)
        return cm.CostModel(float(self.cost["a"]), float(self.cost["b"]))

    def memory_models(self) -> dict[int, mm.MemoryModel] | None:
        if self.memory_budget is None:
            return None
        if self.memory_path:
            return mm.load_models(self.memory_path)
        net = tr.ConvNet(self.classes)
        return {r: mm.fit_memory(tr.memory_profile(net, r, self.memory_batch_sizes))
                for r in self.resolutions}

    def warmup_obj(self) -> sc.Warmup | None:
        if not self.warmup:
            return None
        w = self.warmup
        return sc.Warmup(float(w["start_lr"]), float(w["target_lr"]), int(w["epochs"]))

    def schedule(self) -> sc.TrainingSchedule:
        return sc.build(
            self.scheme, self.stage_epochs, self.lrs, self.resolutions, self.dropout_rates,
            self.fleet(), self.cost_obj(), self.memory_models(), self.warmup_obj(),
            memory_budget=self.memory_budget, large_batch_caps=self.caps,
            factor_scheme=self.factor_scheme, base_resolution=self.base_resolution,
            headroom=self.headroom,
        )

    # serialization -------------------------------------------------------

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(unknown[0], "unknown configuration field")
        return cls(**data)


_INT_FIELDS = ("seed", "n_train", "n_eval", "classes", "r_max", "n_small", "n_large",
               "large_batch", "repeats")
_POSITIVE = ("n_train", "n_eval", "r_max", "large_batch")


def _require(cond: bool, name: str, message: str) -> None:
    if not cond:
        raise ConfigError(name, message)


def validate(cfg: RunConfig, command: str = "train") -> sc.TrainingSchedule | None:
    """Check every field and the cross-module preconditions before any work starts."""
    for name in _INT_FIELDS:
        v = getattr(cfg, name)
        _require(isinstance(v, int) and not isinstance(v, bool), name, f"expected an integer, got {v!r}")
    for name in _POSITIVE:
        _require(getattr(cfg, name) >= 1, name, "must be >= 1")
    _require(cfg.classes >= 2, "classes", "need at least 2 classes")
    _require(cfg.seed >= 0, "seed", "must be non-negative")
    _require(cfg.n_small >= 0, "n_small", "must be >= 0")
    _require(cfg.n_large >= 0, "n_large", "must be >= 0")
    _require(cfg.n_small + cfg.n_large >= 1, "workers", "need at least one worker")
    _require(isinstance(cfg.k, (int, float)) and cfg.k >= 1.0, "k", f"must be >= 1, got {cfg.k!r}")
    _require(cfg.total_data is None or cfg.total_data >= 1, "total_data", "must be >= 1")
    _require(cfg.noise >= 0, "noise", "must be >= 0")
    _require(cfg.contrast > 0, "contrast", "must be > 0")
    _require(cfg.comm_time >= 0, "comm_time", "must be >= 0")
    _require(0.0 <= cfg.headroom < 1.0, "headroom", "must lie in [0, 1)")
    _require(cfg.repeats >= 3, "repeats", "at least 3 repetitions are required")
    try:
        pl.FactorScheme(cfg.factor_scheme)
    except ValueError:
        raise ConfigError("factor_scheme", f"expected ratio|sqrt_ratio|none, got {cfg.factor_scheme!r}")
    try:
        sc.Scheme(cfg.scheme)
    except ValueError:
        raise ConfigError("scheme", f"expected dual|cyclic|hybrid, got {cfg.scheme!r}")
    try:
        policy = cfg.policy_obj()
    except ValueError as exc:
        raise ConfigError("policy", str(exc))
    if policy.kind is ps.PolicyKind.SSP:
        _require(cfg.staleness is not None, "staleness", "required for the ssp policy")
    _require(cfg.staleness is None or (isinstance(cfg.staleness, int) and cfg.staleness >= 0),
             "staleness", "must be a non-negative integer")
    if cfg.cost_path is None:
        _require(isinstance(cfg.cost, dict) and {"a", "b"} <= set(cfg.cost), "cost",
                 "expected an object with fields a and b")
        _require(float(cfg.cost["a"]) > 0 and float(cfg.cost["b"]) > 0, "cost", "a and b must be > 0")
    elif not Path(cfg.cost_path).is_file():
        raise ConfigError("cost_path", f"no such file: {cfg.cost_path}")
    if cfg.memory_path is not None and not Path(cfg.memory_path).is_file():
        raise ConfigError("memory_path", f"no such file: {cfg.memory_path}")
    _require(cfg.memory_budget is None or cfg.memory_budget > 0, "memory_budget", "must be > 0")
    _require(all(int(r) <= cfg.r_max for r in cfg.resolutions), "resolutions",
             f"every resolution must be <= r_max={cfg.r_max}")
    _require(all(int(b) >= 1 for b in (cfg.caps or {}).values()), "large_batch_caps", "must be >= 1")
    _require(all(int(s) >= 1 for s in cfg.profile_batch_sizes), "profile_batch_sizes", "must be >= 1")
    _require(len(set(cfg.memory_batch_sizes)) >= 2, "memory_batch_sizes", "need two distinct sizes")
    if command == "max-batch":
        _require(cfg.memory_budget is not None, "memory_budget", "required for max-batch")
    if command in ("schedule", "train", "simulate"):
        try:
            schedule = cfg.schedule()
        except sc.InconsistentArity as exc:
            raise ConfigError("stage_epochs/lrs/resolutions/dropout_rates", str(exc))
        except sc.ScheduleError as exc:
            raise ConfigError("schedule", str(exc))
        except (DualBatchError, ValueError) as exc:
            raise ConfigError("fleet", str(exc))
        epochs = cfg.epochs if cfg.epochs is not None else schedule.total_epochs
        _require(1 <= epochs <= schedule.total_epochs, "epochs",
                 f"must be in 1..{schedule.total_epochs}")
        if command == "train":
            _require(cfg.data_size == cfg.n_train, "total_data", "must equal n_train for training")
            for sub in schedule.sub_stages:
                _require(sub.plan.assigned <= cfg.n_train, "n_train",
                         f"plan at r={sub.resolution} assigns {sub.plan.assigned} samples")
        return schedule
    if command == "plan":
        try:
            pl.plan(cfg.fleet(), cfg.cost_obj(), cfg.factor_scheme)
        except (DualBatchError, ValueError) as exc:
            raise ConfigError("k", str(exc))
    return None


def load_config(path: str | None) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError("config", f"cannot read {path}: {exc}")
    if isinstance(doc, dict) and "config" in doc and "command" in doc:
        doc = doc["config"]  # a run manifest
    if not isinstance(doc, dict):
        raise ConfigError("config", "top level must be a JSON object")
    try:
        return RunConfig.from_dict(doc)
    except TypeError as exc:
        raise ConfigError("config", str(exc))


def apply_flags(cfg: RunConfig, args: argparse.Namespace) -> RunConfig:
    updates: dict[str, Any] = {}
    for name in ("seed", "k", "policy", "staleness", "scheme", "out", "epochs"):
        value = getattr(args, name, None)
        if value is not None:
            updates[name] = value
    if getattr(args, "workers", None) is not None:
        try:
            ns, nl = (int(p) for p in args.workers.split(","))
        except ValueError:
            raise ConfigError("workers", f"expected NS,NL, got {args.workers!r}")
        updates["n_small"], updates["n_large"] = ns, nl
    if getattr(args, "deterministic", False):
        updates["deterministic"] = True
    if getattr(args, "threaded", False):
        updates["deterministic"] = False
    return dataclasses.replace(cfg, **updates)


# --------------------------------------------------------------------------- output


def output_root(cfg: RunConfig) -> Path:
    return Path(cfg.out or os.environ.get("DUALBATCH_OUT") or "dualbatch_out")


def atomic_write(path: Path, data: str | bytes) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data.encode() if isinstance(data, str) else data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def _atomic_via(path: Path, writer) -> Path:
    """Let ``writer(tmp_path)`` produce a file, then move it into place."""
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=path.suffix)
    os.close(fd)
    try:
        writer(tmp)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def _json(obj) -> str:
    return json.dumps(obj, indent=2, allow_nan=True) + "\n"


def run_dir(root: Path, seed: int) -> Path:
    stamp = datetime.now(timezone.utc).strftime("%Y%m%dT%H%M%SZ")
    base = root / "runs" / f"{stamp}-seed{seed}"
    path, i = base, 1
    while path.exists():
        path = base.with_name(f"{base.name}-{i}")
        i += 1
    path.mkdir(parents=True)
    return path


# --------------------------------------------------------------------------- commands


def cmd_profile(cfg: RunConfig) -> dict[str, Path]:
    from . import report

    out = output_root(cfg) / "profiles"
    net = tr.ConvNet(cfg.classes)
    params = net.init_params(cfg.seed)
    data = tr.generate(cfg.seed, max(cfg.profile_batch_sizes), cfg.classes, cfg.r_max,
                       cfg.noise, cfg.contrast)
    written: dict[str, Path] = {}
    models = {}
    for r in cfg.resolutions:
        images = data.at_resolution(r)

        def bench(bs, images=images):
            net.loss_and_grad(params, images[:bs], data.labels[:bs])

        samples = cm.profile(bench, cfg.profile_batch_sizes, cfg.repeats)
        model = cm.fit(samples)
        models[r] = model
        written[f"timing_r{r}"] = _atomic_via(out / f"timing_r{r}.csv",
                                              lambda p: cm.write_timing_csv(p, samples))
        written[f"cost_r{r}"] = atomic_write(out / f"cost_r{r}.json", _json(model.to_dict()))
        written[f"cost_fig_r{r}"] = _atomic_via(
            out / f"cost_r{r}.png", lambda p: report.plot_cost_fit(samples, model, p, f"r={r}"))
        print(f"r={r}: a={model.a:.6g} s/sample  b={model.b:.6g} s/batch  R2={model.r_squared:.4f}")
    mem = {r: tr.memory_profile(net, r, cfg.memory_batch_sizes) for r in cfg.resolutions}
    mem_models = mm.fit_per_resolution(mem)
    rows = [(r, s) for r in sorted(mem) for s in mem[r]]
    written["memory"] = _atomic_via(out / "memory.csv", lambda p: mm.write_memory_csv(p, rows))
    written["memory_models"] = _atomic_via(out / "memory_models.json",
                                           lambda p: mm.save_models(p, mem_models))
    written["memory_fig"] = _atomic_via(
        out / "memory.png", lambda p: report.plot_memory_fit(mem, mem_models, p, cfg.memory_budget))
    for r, m in mem_models.items():
        print(f"r={r}: memory = {m.fixed_cost:.6g} MiB + {m.per_sample_cost:.6g} MiB x B")
    return written


def cmd_plan(cfg: RunConfig) -> dict[str, Path]:
    out = output_root(cfg) / "plans"
    fleet, cost = cfg.fleet(), cfg.cost_obj()
    chosen = pl.plan(fleet, cost, cfg.factor_scheme)
    sweep = []
    for ns in range(0, fleet.n + 1):
        try:
            sweep.append(pl.plan(pl.FleetSpec(ns, fleet.n - ns, fleet.total_data,
                                              fleet.large_batch, fleet.k), cost, cfg.factor_scheme))
        except DualBatchError as exc:
            log.warning("n_S=%d infeasible: %s", ns, exc)
    table = pl.format_plan_table(sweep)
    print(table)
    tag = f"k{cfg.k:g}_ns{fleet.n_small}_nl{fleet.n_large}"
    return {
        "plan": atomic_write(out / f"plan_{tag}.json", _json(chosen.to_dict())),
        "table": atomic_write(out / f"plan_table_k{cfg.k:g}_n{fleet.n}.txt", table + "\n"),
    }


def cmd_schedule(cfg: RunConfig) -> dict[str, Path]:
    from . import report

    out = output_root(cfg) / "schedules"
    schedule = cfg.schedule()
    table = sc.format_schedule_table(schedule)
    print(table)
    tag = f"{cfg.scheme}_k{cfg.k:g}"
    return {
        "schedule": atomic_write(out / f"schedule_{tag}.json", _json(schedule.to_dict())),
        "table": atomic_write(out / f"schedule_{tag}.txt", table + "\n"),
        "figure": _atomic_via(out / f"schedule_{tag}.png", lambda p: report.plot_schedule(schedule, p)),
    }


def cmd_train(cfg: RunConfig) -> dict[str, Path]:
    from . import report

    schedule = cfg.schedule()
    epochs = cfg.epochs or schedule.total_epochs
    train = tr.generate(cfg.seed, cfg.n_train, cfg.classes, cfg.r_max, cfg.noise, cfg.contrast)
    evals = tr.generate(cfg.seed + 1_000_003, cfg.n_eval, cfg.classes, cfg.r_max,
                        cfg.noise, cfg.contrast)
    job = ps.TrainJob(tr.ConvNet(cfg.classes), train, evals, cfg.cost_obj(), cfg.base_resolution)
    out = run_dir(output_root(cfg), cfg.seed)

    def show(row):
        print(f"epoch {row.epoch:3d}  loss {row.train_loss:.4f}  eval {row.eval_loss:.4f}  "
              f"acc {row.eval_accuracy:.3f}  version {row.global_version}")

    started = time.perf_counter()
    try:
        result = ps.run(job, cfg.policy_obj(), schedule, epochs, cfg.seed,
                        deterministic=cfg.deterministic, comm_time=cfg.comm_time, on_epoch=show)
    except ps.RunAborted as exc:
        if exc.metrics is not None:
            atomic_write(out / "metrics.csv", exc.metrics.to_csv())
        raise
    wall = time.perf_counter() - started
    _, train_acc = job.net.evaluate(result.weights, train.at_resolution(cfg.r_max), train.labels)
    written = {
        "metrics": atomic_write(out / "metrics.csv", result.log.to_csv()),
        "trace": _atomic_via(out / "trace.csv", lambda p: ps.write_trace_csv(p, result.trace)),
        "model": _atomic_via(out / "model.npy", lambda p: np.save(p, result.weights)),
        "figure": _atomic_via(out / "metrics.png", lambda p: report.plot_metrics(result.log, p)),
    }
    manifest = {
        "command": "train",
        "version": __version__,
        "config": cfg.to_dict(),
        "epochs": epochs,
        "final_train_accuracy": train_acc,
        "final_eval_accuracy": result.log.rows[-1].eval_accuracy,
        "global_version": result.log.rows[-1].global_version,
        "wall_time_s": wall,
        "artifacts": {k: p.name for k, p in written.items()},
    }
    written["manifest"] = atomic_write(out / "manifest.json", _json(manifest))
    print(f"train accuracy {train_acc:.3f}; artifacts in {out}")
    return written


def cmd_simulate(cfg: RunConfig) -> dict[str, Path]:
    from . import report

    schedule = cfg.schedule()
    epochs = cfg.epochs or schedule.total_epochs
    result = sim.simulate(schedule, cfg.cost_obj(), cfg.policy_obj(), epochs, cfg.comm_time,
                          cfg.base_resolution)
    out = run_dir(output_root(cfg), cfg.seed)
    print("epoch,makespan_s," + ",".join(f"worker{w}_s" for w in sorted(result.epoch_finish[0])))
    for i, (span, fin) in enumerate(zip(result.epoch_makespan, result.epoch_finish), start=1):
        print(f"{i},{span:.6g}," + ",".join(f"{fin[w]:.6g}" for w in sorted(fin)))
    print(f"total makespan {result.total_makespan:.6g} s; max iteration gap {result.max_gap}")
    written = {
        "report": atomic_write(out / "sim_report.json", _json(result.to_dict())),
        "trace": _atomic_via(out / "trace.csv", lambda p: ps.write_trace_csv(p, result.trace)),
        "figure": _atomic_via(out / "simulation.png", lambda p: report.plot_simulation(result, p)),
        "gap_figure": _atomic_via(out / "gap.png", lambda p: report.plot_gap_trace(
            result.gap_trace, p, cfg.policy_obj().bound)),
    }
    manifest = {"command": "simulate", "version": __version__, "config": cfg.to_dict(),
                "artifacts": {k: p.name for k, p in written.items()}}
    written["manifest"] = atomic_write(out / "manifest.json", _json(manifest))
    return written


def cmd_max_batch(cfg: RunConfig) -> dict[str, Path]:
    out = output_root(cfg) / "profiles"
    models = cfg.memory_models()
    lines = ["resolution,fixed_mib,per_sample_mib,budget_mib,max_batch"]
    for r in sorted(models):
        m = models[r]
        try:
            best = str(mm.max_batch(m, cfg.memory_budget, cfg.headroom))
        except mm.BudgetTooSmall:
            best = "0"
        lines.append(f"{r},{m.fixed_cost:.6g},{m.per_sample_cost:.6g},{cfg.memory_budget:g},{best}")
    text = "\n".join(lines) + "\n"
    print(text, end="")
    return {"max_batch": atomic_write(out / "max_batch.csv", text)}


COMMANDS = {
    "profile": cmd_profile,
    "plan": cmd_plan,
    "schedule": cmd_schedule,
    "train": cmd_train,
    "simulate": cmd_simulate,
    "max-batch": cmd_max_batch,
}


# --------------------------------------------------------------------------- entry point


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="JSON config or run manifest")
    common.add_argument("--seed", type=int)
    common.add_argument("--k", type=float, help="extra training-time ratio (>= 1)")
    common.add_argument("--workers", metavar="NS,NL", help="small- and large-batch worker counts")
    common.add_argument("--policy", choices=["bsp", "asp", "ssp"])
    common.add_argument("--staleness", type=int)
    common.add_argument("--scheme", choices=["dual", "cyclic", "hybrid"])
    common.add_argument("--epochs", type=int)
    mode = common.add_mutually_exclusive_group()
    mode.add_argument("--deterministic", action="store_true", help="virtual-time scheduler (default)")
    mode.add_argument("--threaded", action="store_true", help="one thread per worker")
    common.add_argument("--out", metavar="DIR", help="output root (default $DUALBATCH_OUT)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="dualbatch", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sub.add_parser(name, parents=[common])
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = apply_flags(load_config(args.config), args)
        validate(cfg, args.command)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        COMMANDS[args.command](cfg)
    except (DualBatchError, OSError, ValueError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
