"""Linear memory model ``M(B) = fixed + per_sample * B`` and the largest batch under a budget.

Models are kept per input resolution, since activation memory per sample
grows with image area while parameter memory does not.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .cost_model import ols
from .errors import BudgetTooSmall, NonPositiveSlope

MIB = 1024 * 1024


@dataclass(frozen=True)
class MemorySample:
    batch_size: int
    peak_memory: float  # MiB

    def __post_init__(self):
        if int(self.batch_size) != self.batch_size or self.batch_size < 1:
            raise ValueError(f"batch_size must be a positive integer, got {self.batch_size!r}")
        if not self.peak_memory > 0:
            raise ValueError(f"peak_memory must be > 0, got {self.peak_memory!r}")


@dataclass(frozen=True)
class MemoryModel:
    fixed_cost: float  # MiB
    per_sample_cost: float  # MiB per sample

    def predict(self, batch_size: float) -> float:
        return self.fixed_cost + self.per_sample_cost * batch_size

    def to_dict(self) -> dict:
        return {"fixed_cost": self.fixed_cost, "per_sample_cost": self.per_sample_cost}

    @classmethod
    def from_dict(cls, data: Mapping) -> "MemoryModel":
        return cls(float(data["fixed_cost"]), float(data["per_sample_cost"]))


def fit_memory(samples: Sequence[MemorySample]) -> MemoryModel:
    slope, intercept, _ = ols([s.batch_size for s in samples], [s.peak_memory for s in samples])
    if slope <= 0:
        raise NonPositiveSlope(f"fitted per-sample memory {slope:.6g} MiB is not positive")
    return MemoryModel(fixed_cost=intercept, per_sample_cost=slope)


def max_batch(model: MemoryModel, memory_budget: float, headroom: float = 0.0) -> int:
    """Largest integer ``B`` with ``M(B) <= memory_budget * (1 - headroom)``."""
    if not 0.0 <= headroom < 1.0:
        raise ValueError(f"headroom must be in [0, 1), got {headroom}")
    budget = memory_budget * (1.0 - headroom)
    if budget <= model.fixed_cost:
        raise BudgetTooSmall(
            f"budget {budget:.6g} MiB does not exceed fixed cost {model.fixed_cost:.6g} MiB"
        )
    raw = (budget - model.fixed_cost) / model.per_sample_cost
    # absorb round-off when the budget lands exactly on a lattice point
    best = math.floor(raw + 1e-9 * max(1.0, raw))
    if best < 1:
        raise BudgetTooSmall(f"budget {budget:.6g} MiB does not fit a single sample")
    return best


def fit_per_resolution(samples: Mapping[int, Sequence[MemorySample]]) -> dict[int, MemoryModel]:
    return {r: fit_memory(s) for r, s in sorted(samples.items())}


def write_memory_csv(path: str | Path, rows: Iterable[tuple[int, MemorySample]]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["resolution", "batch_size", "peak_memory_mib"])
        for resolution, s in rows:
            writer.writerow([resolution, s.batch_size, repr(float(s.peak_memory))])


def read_memory_csv(path: str | Path) -> dict[int, list[MemorySample]]:
    out: dict[int, list[MemorySample]] = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            out.setdefault(int(row["resolution"]), []).append(
                MemorySample(int(row["batch_size"]), float(row["peak_memory_mib"]))
            )
    return out


def save_models(path: str | Path, models: Mapping[int, MemoryModel]) -> None:
    doc = {str(r): m.to_dict() for r, m in sorted(models.items())}
    Path(path).write_text(json.dumps(doc, indent=2) + "\n")


def load_models(path: str | Path) -> dict[int, MemoryModel]:
    doc = json.loads(Path(path).read_text())
    return {int(r): MemoryModel.from_dict(m) for r, m in doc.items()}
