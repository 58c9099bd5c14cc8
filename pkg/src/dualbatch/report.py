"""Figures written next to the CSV/JSON artifacts. Uses the Agg backend only."""

from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .cost_model import CostModel, TimingSample  # noqa: E402
from .memory_model import MemoryModel, MemorySample  # noqa: E402
from .ps_core import MetricsLog  # noqa: E402
from .scheduler import TrainingSchedule  # noqa: E402

STYLE = {
    "figure.figsize": (6.4, 4.0),
    "figure.dpi": 110,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "font.size": 9,
    "legend.fontsize": 8,
    "lines.linewidth": 1.4,
}
ROLE_COLORS = {"large": "#2b8cbe", "small": "#e6550d"}


def _save(fig, path: str | Path) -> Path:
    path = Path(path)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def plot_cost_fit(samples: Sequence[TimingSample], model: CostModel, path: str | Path,
                  title: str = "per-batch time") -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        x = np.array([s.batch_size for s in samples], dtype=float)
        y = np.array([s.seconds_per_batch for s in samples])
        grid = np.linspace(0, x.max() * 1.05, 100)
        ax.plot(x, y, "o", label="measured")
        ax.plot(grid, model.a * grid + model.b, "-",
                label=f"a={model.a:.3g}, b={model.b:.3g}, R²={model.r_squared:.3f}")
        ax.set_xlabel("batch size")
        ax.set_ylabel("seconds per batch")
        ax.set_title(title)
        ax.legend()
        return _save(fig, path)


def plot_memory_fit(samples: Mapping[int, Sequence[MemorySample]],
                    models: Mapping[int, MemoryModel], path: str | Path,
                    budget: float | None = None) -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for r in sorted(samples):
            x = np.array([s.batch_size for s in samples[r]], dtype=float)
            y = np.array([s.peak_memory for s in samples[r]])
            line, = ax.plot(x, y, "o", label=f"r={r}")
            grid = np.linspace(0, x.max() * 1.05, 100)
            ax.plot(grid, models[r].predict(grid), "-", color=line.get_color())
        if budget is not None:
            ax.axhline(budget, color="k", ls="--", lw=1, label="budget")
        ax.set_xlabel("batch size")
        ax.set_ylabel("peak memory (MiB)")
        ax.legend()
        return _save(fig, path)


def plot_metrics(log: MetricsLog, path: str | Path) -> Path:
    rows = log.rows
    epochs = [r.epoch for r in rows]
    with plt.rc_context(STYLE):
        fig, (ax_l, ax_a) = plt.subplots(1, 2, figsize=(9, 3.6))
        ax_l.plot(epochs, [r.train_loss for r in rows], label="train")
        ax_l.plot(epochs, [r.eval_loss for r in rows], label="eval")
        ax_l.set_xlabel("epoch")
        ax_l.set_ylabel("cross-entropy")
        ax_l.legend()
        ax_a.plot(epochs, [r.eval_accuracy for r in rows], color="#31a354")
        ax_a.set_xlabel("epoch")
        ax_a.set_ylabel("eval accuracy")
        ax_a.set_ylim(0, 1.02)
        return _save(fig, path)


def plot_schedule(schedule: TrainingSchedule, path: str | Path) -> Path:
    epochs = np.arange(1, schedule.total_epochs + 1)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        ax.step(epochs, [schedule.lr_at(int(e)) for e in epochs], where="post", label="LR")
        ax.set_yscale("log")
        ax.set_xlabel("epoch")
        ax.set_ylabel("learning rate")
        twin = ax.twinx()
        twin.step(epochs, [schedule.config_at(int(e)).resolution for e in epochs],
                  where="post", color="#e6550d", label="resolution")
        twin.set_ylabel("resolution")
        twin.grid(False)
        fig.legend(loc="upper right")
        return _save(fig, path)


def plot_simulation(report, path: str | Path, epoch_index: int = 0) -> Path:
    """Per-worker completion times for one epoch plus accumulated idle time."""
    finish = report.epoch_finish[epoch_index]
    roles = report.roles[epoch_index]
    workers = sorted(finish)
    with plt.rc_context(STYLE):
        fig, (ax_t, ax_i) = plt.subplots(1, 2, figsize=(9, 3.6))
        ax_t.barh(workers, [finish[w] for w in workers],
                  color=[ROLE_COLORS[roles[w]] for w in workers])
        ax_t.set_xlabel(f"completion time, epoch {epoch_index + 1} (s)")
        ax_t.set_ylabel("worker")
        idle = report.idle
        ax_i.bar(workers, [idle[w] for w in workers],
                 color=[ROLE_COLORS[roles[w]] for w in workers])
        ax_i.set_xlabel("worker")
        ax_i.set_ylabel("idle time, whole run (s)")
        return _save(fig, path)


def plot_gap_trace(gap_trace: Sequence[tuple[float, int]], path: str | Path,
                   staleness: int | None = None) -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        if gap_trace:
            t, g = zip(*gap_trace)
            ax.step(t, g, where="post")
        if staleness is not None:
            ax.axhline(staleness, color="k", ls="--", lw=1, label=f"s={staleness}")
            ax.legend()
        ax.set_xlabel("virtual time (s)")
        ax.set_ylabel("iteration gap")
        return _save(fig, path)
