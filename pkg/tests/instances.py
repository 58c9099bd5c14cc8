"""Random (fleet, cost) instances shared by the balance and k-ratio checks.

The regime is anchored on the CIFAR-scale setup: 2 to 8 workers with both
batch classes present, 2e4 to 2e5 samples, B_L from 64 to 1024 with at
least 20 large batches per worker per epoch, per-sample cost a from 1e-4
to 1e-2 s and overhead ratio b/a from 20 to 400.
"""

from __future__ import annotations

import math

import numpy as np

from dualbatch.cost_model import CostModel
from dualbatch.errors import InfeasibleSmallBatch
from dualbatch.planner import FleetSpec, plan


def _log_uniform(rng, lo, hi):
    return math.exp(rng.uniform(math.log(lo), math.log(hi)))


def random_instance(rng: np.random.Generator, k: float | None = None):
    while True:
        n = int(rng.integers(2, 9))
        n_small = int(rng.integers(1, n))
        d = int(_log_uniform(rng, 2e4, 2e5))
        large = int(_log_uniform(rng, 64, 1024))
        if d / n < 20 * large:
            continue
        a = _log_uniform(rng, 1e-4, 1e-2)
        b = a * _log_uniform(rng, 20, 400)
        fleet = FleetSpec(n_small, n - n_small, d, large, k if k is not None else rng.uniform(1.02, 1.2))
        cost = CostModel(a, b)
        try:
            return fleet, cost, plan(fleet, cost)
        except InfeasibleSmallBatch:
            continue
