"""Dual-batch allocation: data per worker class, small batch size, update factor.

Every worker is given the same time budget, ``k`` times the epoch time of an
all-large-batch fleet. Large-batch workers absorb the extra time with extra
data; small-batch workers split what is left and pick the batch size whose
epoch time matches the budget.
"""

from __future__ import annotations

import enum
import logging
import math
from dataclasses import dataclass
from typing import Iterable, Mapping

from .cost_model import CostModel, predict_simplified
from .errors import InfeasibleSmallBatch, NoWorkers

log = logging.getLogger(__name__)


class FactorScheme(str, enum.Enum):
    RATIO = "ratio"
    SQRT_RATIO = "sqrt_ratio"
    NONE = "none"


@dataclass(frozen=True)
class FleetSpec:
    n_small: int
    n_large: int
    total_data: int
    large_batch: int
    k: float = 1.0

    def __post_init__(self):
        if self.n_small < 0 or self.n_large < 0:
            raise ValueError("worker counts must be non-negative")
        if self.total_data < 1:
            raise ValueError("total_data must be positive")
        if self.large_batch < 1:
            raise ValueError("large_batch must be positive")
        if not self.k >= 1.0:
            raise ValueError(f"k must be >= 1, got {self.k}")

    @property
    def n(self) -> int:
        return self.n_small + self.n_large


@dataclass(frozen=True)
class AllocationPlan:
    k: float
    n_small: int
    n_large: int
    large_batch: int
    small_batch: int | None
    d_small: int | None
    d_large: int | None
    factor_scheme: FactorScheme
    factor_value: float

    @property
    def n(self) -> int:
        return self.n_small + self.n_large

    def roles(self) -> list[str]:
        """Role per worker id: large-batch workers take the lowest ids."""
        return ["large"] * self.n_large + ["small"] * self.n_small

    def batch_for(self, role: str) -> int:
        return self.large_batch if role == "large" else self.small_batch

    def data_for(self, role: str) -> int:
        return self.d_large if role == "large" else self.d_small

    def factor_for(self, role: str) -> float:
        return 1.0 if role == "large" else self.factor_value

    @property
    def assigned(self) -> int:
        return self.n_large * (self.d_large or 0) + self.n_small * (self.d_small or 0)

    def to_dict(self) -> dict:
        return {
            "k": self.k,
            "n_small": self.n_small,
            "n_large": self.n_large,
            "large_batch": self.large_batch,
            "small_batch": self.small_batch,
            "d_small": self.d_small,
            "d_large": self.d_large,
            "factor_scheme": self.factor_scheme.value,
            "factor_value": self.factor_value,
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "AllocationPlan":
        def opt_int(v):
            return None if v is None else int(v)

        return cls(
            k=float(data["k"]),
            n_small=int(data["n_small"]),
            n_large=int(data["n_large"]),
            large_batch=int(data["large_batch"]),
            small_batch=opt_int(data.get("small_batch")),
            d_small=opt_int(data.get("d_small")),
            d_large=opt_int(data.get("d_large")),
            factor_scheme=FactorScheme(data["factor_scheme"]),
            factor_value=float(data["factor_value"]),
        )


@dataclass(frozen=True)
class PlanTimes:
    large: float | None
    small: float | None
    budget: float

    @property
    def spread(self) -> float:
        vals = [t for t in (self.large, self.small) if t is not None]
        return max(vals) - min(vals)


def _floor(value: float) -> int:
    # k*d/n often lands a few ulps below an integer (e.g. 1.05 * 50000 / 4)
    return math.floor(value + 1e-9 * max(1.0, abs(value)))


def factor(scheme: FactorScheme | str, d_small: int, d_large: int) -> float:
    scheme = FactorScheme(scheme)
    if scheme is FactorScheme.NONE:
        return 1.0
    if d_large <= 0 or d_small <= 0:
        raise ValueError("data amounts must be positive for ratio-based factors")
    ratio = d_small / d_large
    return math.sqrt(ratio) if scheme is FactorScheme.SQRT_RATIO else ratio


def time_budget(fleet: FleetSpec, cost: CostModel) -> float:
    """Per-worker epoch time allowed by ``k``: ``k * (a + b/B_L) * d/n``."""
    if fleet.n == 0:
        raise NoWorkers("fleet has no workers")
    return fleet.k * (cost.a + cost.b / fleet.large_batch) * fleet.total_data / fleet.n


def solve_small_batch(cost: CostModel, d_small: int, budget: float, large_batch: int) -> int:
    """Integer batch size whose simplified epoch time over ``d_small`` best matches ``budget``."""
    denom = budget / d_small - cost.a
    if denom <= 0 or cost.b <= 0:
        raise InfeasibleSmallBatch(
            f"no positive small batch: budget/d_S - a = {denom:.6g}, b = {cost.b:.6g}"
        )
    continuous = cost.b / denom
    if continuous < 1:
        log.warning("small batch solution %.3f < 1; clamping to 1", continuous)
    base = min(max(math.floor(continuous), 1), large_batch)
    candidates = {c for c in (base - 1, base, base + 1) if 1 <= c <= large_batch}

    def mismatch(bs: int) -> tuple[float, int]:
        # ties go to the larger batch, which stays inside the budget
        return abs((cost.a + cost.b / bs) * d_small - budget), -bs

    return min(candidates, key=mismatch)


def plan(
    fleet: FleetSpec, cost: CostModel, scheme: FactorScheme | str = FactorScheme.RATIO
) -> AllocationPlan:
    scheme = FactorScheme(scheme)
    n = fleet.n
    if n == 0:
        raise NoWorkers("fleet has no workers")
    if cost.a <= 0 or cost.b <= 0:
        raise ValueError(f"cost model needs a > 0 and b > 0, got a={cost.a}, b={cost.b}")
    d = fleet.total_data

    if fleet.n_small == 0:
        # no small workers to pay extra time for; this is the baseline
        return AllocationPlan(
            fleet.k, 0, fleet.n_large, fleet.large_batch, None, None, d // n, scheme, 1.0
        )

    budget = time_budget(fleet, cost)
    if fleet.n_large > 0:
        d_large = _floor(fleet.k * d / n)
        remaining = d - fleet.n_large * d_large
        if remaining < fleet.n_small:
            raise InfeasibleSmallBatch(
                f"k={fleet.k} leaves {remaining} samples for {fleet.n_small} small workers"
            )
        d_small = remaining // fleet.n_small
        # near k=1 the small class can end up with more data; the factor never amplifies
        value = min(1.0, factor(scheme, d_small, d_large))
    else:
        d_large = None
        d_small = d // n
        value = 1.0

    small_batch = solve_small_batch(cost, d_small, budget, fleet.large_batch)
    return AllocationPlan(
        fleet.k, fleet.n_small, fleet.n_large, fleet.large_batch,
        small_batch, d_small, d_large, scheme, value,
    )


def baseline_plan(n_workers: int, total_data: int, large_batch: int) -> AllocationPlan:
    """All workers on the large batch, data split evenly (k = 1)."""
    if n_workers < 1:
        raise NoWorkers("fleet has no workers")
    return AllocationPlan(
        1.0, 0, n_workers, large_batch, None, None,
        total_data // n_workers, FactorScheme.NONE, 1.0,
    )


def predict_plan_times(allocation: AllocationPlan, fleet: FleetSpec, cost: CostModel) -> PlanTimes:
    large = small = None
    if allocation.n_large > 0:
        large = predict_simplified(cost, allocation.large_batch, allocation.d_large)
    if allocation.n_small > 0:
        small = predict_simplified(cost, allocation.small_batch, allocation.d_small)
    if fleet.n_small == 0:
        budget = (cost.a + cost.b / fleet.large_batch) * fleet.total_data / fleet.n
    else:
        budget = time_budget(fleet, cost)
    return PlanTimes(large, small, budget)


def format_plan_table(plans: Iterable[AllocationPlan]) -> str:
    """Text table in the layout k | (n_S, n_L) | B_S | d_S | B_L | d_L | d_S/d_L."""
    header = ("k", "(n_S, n_L)", "B_S", "d_S", "B_L", "d_L", "d_S/d_L")
    rows = []
    for p in plans:
        ratio = "-"
        if p.n_small and p.n_large:
            ratio = f"{p.d_small / p.d_large:.3f}"
        rows.append((
            f"{p.k:g}",
            f"({p.n_small}, {p.n_large})",
            "-" if p.small_batch is None else str(p.small_batch),
            "-" if p.d_small is None else str(p.d_small),
            str(p.large_batch) if p.n_large else "-",
            "-" if p.d_large is None else str(p.d_large),
            ratio,
        ))
    widths = [max(len(h), *(len(r[i]) for r in rows)) if rows else len(h)
              for i, h in enumerate(header)]
    lines = ["  ".join(h.rjust(w) for h, w in zip(header, widths))]
    lines.append("  ".join("-" * w for w in widths))
    lines.extend("  ".join(c.rjust(w) for c, w in zip(r, widths)) for r in rows)
    return "\n".join(lines)
