"""Linear per-batch training-time model.

A batch of ``x`` samples is assumed to take ``a*x + b`` seconds, so an epoch
over ``d`` samples costs ``(a*x + b) * ceil(d/x)`` seconds, or approximately
``(a + b/x) * d`` once the ceiling is dropped.
"""

from __future__ import annotations

import csv
import json
import logging
import statistics
import time
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .errors import BenchmarkFailure, DegenerateInput, NonPositiveSlope

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TimingSample:
    batch_size: int
    seconds_per_batch: float

    def __post_init__(self):
        if int(self.batch_size) != self.batch_size or self.batch_size < 1:
            raise ValueError(f"batch_size must be a positive integer, got {self.batch_size!r}")
        if not self.seconds_per_batch > 0:
            raise ValueError(f"seconds_per_batch must be > 0, got {self.seconds_per_batch!r}")


@dataclass(frozen=True)
class CostModel:
    a: float
    b: float
    r_squared: float = 1.0
    sample_count: int = 0

    def batch_time(self, batch_size: float) -> float:
        return self.a * batch_size + self.b

    def scaled(self, resolution: int, base_resolution: int) -> "CostModel":
        """Per-sample cost rescaled by image area; per-batch overhead unchanged."""
        ratio = (resolution / base_resolution) ** 2
        return CostModel(self.a * ratio, self.b, self.r_squared, self.sample_count)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Mapping) -> "CostModel":
        return cls(
            a=float(data["a"]),
            b=float(data["b"]),
            r_squared=float(data.get("r_squared", 1.0)),
            sample_count=int(data.get("sample_count", 0)),
        )


def ols(x: Sequence[float], y: Sequence[float]) -> tuple[float, float, float]:
    """Ordinary least squares for ``y = slope*x + intercept``.

    Returns ``(slope, intercept, r_squared)``. Raises DegenerateInput when
    ``x`` has fewer than two distinct values.
    """
    xs = np.asarray(x, dtype=np.float64)
    ys = np.asarray(y, dtype=np.float64)
    if xs.size < 2 or np.unique(xs).size < 2:
        raise DegenerateInput("need at least two distinct batch sizes to fit a line")
    x_mean = xs.mean()
    y_mean = ys.mean()
    dx = xs - x_mean
    slope = float(np.dot(dx, ys - y_mean) / np.dot(dx, dx))
    intercept = float(y_mean - slope * x_mean)
    resid = ys - (slope * xs + intercept)
    ss_res = float(np.dot(resid, resid))
    ss_tot = float(np.dot(ys - y_mean, ys - y_mean))
    r2 = 1.0 if ss_tot == 0.0 else max(0.0, 1.0 - ss_res / ss_tot)
    return slope, intercept, r2


def fit(samples: Sequence[TimingSample]) -> CostModel:
    slope, intercept, r2 = ols(
        [s.batch_size for s in samples], [s.seconds_per_batch for s in samples]
    )
    if slope <= 0:
        raise NonPositiveSlope(f"fitted per-sample time a={slope:.6g} is not positive")
    if intercept < 0:
        # kept as-is: clamping would hide a bad profile
        log.warning("fitted per-batch overhead b=%.6g is negative", intercept)
    return CostModel(a=slope, b=intercept, r_squared=r2, sample_count=len(samples))


def _check_sizes(batch_size: int, data_amount: int) -> None:
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    if data_amount < 1:
        raise ValueError(f"data_amount must be >= 1, got {data_amount}")


def predict_exact(model: CostModel, batch_size: int, data_amount: int) -> float:
    _check_sizes(batch_size, data_amount)
    batches = -(-int(data_amount) // int(batch_size))
    return model.batch_time(batch_size) * batches


def predict_simplified(model: CostModel, batch_size: float, data_amount: float) -> float:
    _check_sizes(batch_size, data_amount)
    return (model.a + model.b / batch_size) * data_amount


def profile(
    trainer_benchmark: Callable[[int], object],
    batch_sizes: Iterable[int],
    repeats: int = 3,
    clock: Callable[[], float] = time.perf_counter,
) -> list[TimingSample]:
    """Time ``trainer_benchmark(batch_size)`` for each size.

    One untimed warm-up call precedes ``repeats`` timed calls; the median is
    recorded. Sizes run serially so they do not contend with each other.
    """
    sizes = list(batch_sizes)
    if len(set(sizes)) != len(sizes):
        raise ValueError("batch sizes must be distinct")
    if repeats < 3:
        raise ValueError("at least 3 repetitions are required")
    samples = []
    for size in sizes:
        try:
            trainer_benchmark(size)
            runs = []
            for _ in range(repeats):
                start = clock()
                trainer_benchmark(size)
                runs.append(clock() - start)
        except Exception as exc:
            raise BenchmarkFailure(size, exc) from exc
        # timer resolution can round a tiny benchmark to 0
        samples.append(TimingSample(size, max(statistics.median(runs), 1e-12)))
    return samples


def cost_at(
    cost: CostModel | Mapping[int, CostModel], resolution: int, base_resolution: int
) -> CostModel:
    """Cost model for ``resolution``: a fitted one if available, else area-scaled."""
    if isinstance(cost, CostModel):
        return cost.scaled(resolution, base_resolution)
    if resolution in cost:
        return cost[resolution]
    if base_resolution in cost:
        return cost[base_resolution].scaled(resolution, base_resolution)
    raise KeyError(f"no cost model for resolution {resolution} or base {base_resolution}")


def write_timing_csv(path: str | Path, samples: Iterable[TimingSample]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["batch_size", "seconds_per_batch"])
        for s in samples:
            writer.writerow([s.batch_size, repr(float(s.seconds_per_batch))])


def read_timing_csv(path: str | Path) -> list[TimingSample]:
    with open(path, newline="") as fh:
        return [
            TimingSample(int(row["batch_size"]), float(row["seconds_per_batch"]))
            for row in csv.DictReader(fh)
        ]


def save_model(path: str | Path, model: CostModel) -> None:
    Path(path).write_text(json.dumps(model.to_dict(), indent=2) + "\n")


def load_model(path: str | Path) -> CostModel:
    return CostModel.from_dict(json.loads(Path(path).read_text()))


def one_batch_bound(model: CostModel, batch_size: int) -> float:
    """Upper bound on ``|predict_exact - predict_simplified|``: one batch of work."""
    return model.batch_time(batch_size)


__all__ = [
    "TimingSample",
    "CostModel",
    "fit",
    "ols",
    "predict_exact",
    "predict_simplified",
    "profile",
    "cost_at",
    "one_batch_bound",
    "read_timing_csv",
    "write_timing_csv",
    "save_model",
    "load_model",
]
