"""Acceptance criteria 1 to 13, each at its stated tolerance.

Every check prints one ``ACCEPTANCE n: PASS|FAIL`` line; the lines are also
collected into the pytest terminal summary. Run standalone with
``python tests/test_acceptance.py``.
"""

from __future__ import annotations

import math
import sys
import time
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from instances import random_instance  # noqa: E402

from dualbatch import planner as pl  # noqa: E402
from dualbatch import ps_core as ps  # noqa: E402
from dualbatch import scheduler as sc  # noqa: E402
from dualbatch import timing_sim as ts  # noqa: E402
from dualbatch import trainer as tr  # noqa: E402
from dualbatch.cost_model import CostModel, predict_exact, predict_simplified  # noqa: E402
from dualbatch.memory_model import MIB, MemoryModel, fit_memory, max_batch  # noqa: E402

try:
    from conftest import ACCEPTANCE_LINES
except ImportError:  # standalone run
    ACCEPTANCE_LINES = []


def report(number: int, ok: bool, detail: str) -> None:
    line = f"ACCEPTANCE {number}: {'PASS' if ok else 'FAIL'} - {detail}"
    print(line)
    ACCEPTANCE_LINES.append(line)
    assert ok, line


# --------------------------------------------------------------------------- 1


def check_1():
    start = time.perf_counter()
    cost = CostModel(0.002, 0.4)
    expected = {
        1.05: (13125, [10625, 11875, 12291, 12500], [0.810, 0.905, 0.936]),
        1.1: (13750, [8750, 11250, 12083, 12500], [0.636, 0.818, 0.879]),
    }
    problems = []
    for k, (d_large, d_small, ratios) in expected.items():
        for n_small, want in zip(range(1, 5), d_small):
            p = pl.plan(pl.FleetSpec(n_small, 4 - n_small, 50000, 500, k), cost)
            if p.d_small != want:
                problems.append(f"k={k} n_S={n_small}: d_S={p.d_small} != {want}")
            if n_small < 4:
                if p.d_large != d_large:
                    problems.append(f"k={k} n_S={n_small}: d_L={p.d_large} != {d_large}")
                if round(p.factor_value, 3) != ratios[n_small - 1]:
                    problems.append(f"k={k} n_S={n_small}: factor {p.factor_value:.4f}")
    elapsed = time.perf_counter() - start
    ok = not problems and elapsed < 1.0
    return ok, f"reference fleets: d_L/d_S/factors exact ({len(problems)} mismatches), {elapsed*1e3:.1f} ms"


# --------------------------------------------------------------------------- 2


def check_2():
    sqrt_ok = round(math.sqrt(0.636), 3) == 0.797
    rng = np.random.default_rng(2)
    checked = violations = equal_cases = 0
    while checked < 1000:
        n = int(rng.integers(2, 17))
        n_small = int(rng.integers(1, n))
        if rng.random() < 0.1:
            k, d = 1.0, n * int(rng.integers(100, 20000))  # d_S == d_L exactly
        else:
            k, d = float(rng.uniform(1.001, 1.3)), int(rng.integers(1000, 2_000_000))
        fleet = pl.FleetSpec(n_small, n - n_small, d, 256, k)
        try:
            ratio = pl.plan(fleet, CostModel(1e-3, 1.0), pl.FactorScheme.RATIO)
            root = pl.plan(fleet, CostModel(1e-3, 1.0), pl.FactorScheme.SQRT_RATIO)
        except pl.InfeasibleSmallBatch:
            continue
        if ratio.d_small > ratio.d_large:
            continue  # factor saturates at 1; covered by the planner unit tests
        checked += 1
        same = root.factor_value == ratio.factor_value
        equal_cases += same
        if root.factor_value < ratio.factor_value or same != (ratio.d_small == ratio.d_large):
            violations += 1
    ok = sqrt_ok and violations == 0
    return ok, (f"sqrt(0.636)={math.sqrt(0.636):.5f}; SqrtRatio>=Ratio on 1000 plans, "
                f"{violations} violations, {equal_cases} equality cases all with d_S=d_L")


# --------------------------------------------------------------------------- 3


def check_3():
    start = time.perf_counter()
    rng = np.random.default_rng(3)
    bound_bad = rel_bad = regime = 0
    worst = 0.0
    for _ in range(10_000):
        model = CostModel(10 ** rng.uniform(-6, -1), 10 ** rng.uniform(-4, 0))
        x = int(rng.integers(1, 4097))
        d = int(rng.integers(1, 2_000_001))
        exact = predict_exact(model, x, d)
        simple = predict_simplified(model, x, d)
        if abs(exact - simple) > model.a * x + model.b:
            bound_bad += 1
        if x >= 32 and d >= 20 * x:
            regime += 1
            rel = abs(exact - simple) / simple
            worst = max(worst, rel)
            rel_bad += rel > 0.05
    elapsed = time.perf_counter() - start
    ok = bound_bad == 0 and rel_bad == 0 and elapsed < 1.0
    return ok, (f"10000 cases: {bound_bad} above a*x+b; {regime} in x>=32,d>=20x regime, "
                f"worst rel {worst:.4f}; {elapsed:.2f} s")


# --------------------------------------------------------------------------- 4


def check_4():
    rng = np.random.default_rng(4)
    predicted_bad = event_bad = 0
    worst = 0.0
    for _ in range(1000):
        fleet, cost, p = random_instance(rng)
        bound = cost.a * p.small_batch + cost.b
        t_large = predict_simplified(cost, p.large_batch, p.d_large)
        t_small = predict_simplified(cost, p.small_batch, p.d_small)
        spread = abs(t_small - t_large)
        worst = max(worst, spread / bound)
        predicted_bad += spread > bound
        event_bad += ts.simulate_plan(p, cost).class_spread() > bound
    ok = predicted_bad == 0 and event_bad == 0
    return ok, (f"1000 instances: {predicted_bad} predicted and {event_bad} simulated spreads "
                f"exceed a*B_S+b; worst spread {worst:.1f}x the bound")


# --------------------------------------------------------------------------- 5


def check_5():
    out = []
    ok = True
    for k in (1.05, 1.1):
        rng = np.random.default_rng(int(k * 100))
        ratios = []
        for _ in range(100):
            fleet, cost, p = random_instance(rng, k)
            base = pl.baseline_plan(fleet.n, fleet.total_data, fleet.large_batch)
            ratios.append(ts.plan_vs_baseline(fleet, p, cost, base))
        ratios = np.array(ratios)
        ok &= bool(np.all(np.abs(ratios - k) <= 0.02))
        out.append(f"k={k}: [{ratios.min():.4f}, {ratios.max():.4f}]")
    return ok, "makespan ratio over 100 fleets " + "; ".join(out)


# --------------------------------------------------------------------------- 6


def scripted_tasks(speeds, iterations):
    return [ps.WorkerTask(w, [s] * iterations) for w, s in enumerate(speeds)]


def replay(policy, tasks):
    loop = ps.VirtualScheduler(ps.ParameterServer(np.zeros(1), policy))
    loop.run_round(tasks)
    return loop


def check_6():
    speeds = [1.0, 1.5, 2.0, 3.0]
    bsp = replay(ps.SyncPolicy.bsp(), scripted_tasks(speeds, 12))
    ssp0 = replay(ps.SyncPolicy.ssp(0), scripted_tasks(speeds, 12))
    asp = replay(ps.SyncPolicy.asp(), scripted_tasks(speeds, 12))
    sspinf = replay(ps.SyncPolicy.ssp(None), scripted_tasks(speeds, 12))
    same_bsp = ps.push_sequence(bsp.trace) == ps.push_sequence(ssp0.trace)
    blocks = sum(e.event == "block" for e in sspinf.trace)
    same_asp = [(e.worker_id, e.event, e.version) for e in sspinf.trace] == [
        (e.worker_id, e.event, e.version) for e in asp.trace
    ]
    worst = {}
    gap_ok = True
    for s in (1, 2, 3):
        worst[s] = 0
        for seed in range(50):
            rng = np.random.default_rng([seed, s])
            tasks = [
                ps.WorkerTask(w, list(rng.lognormal(math.log(rng.uniform(0.5, 3.0)), 0.3, 30)))
                for w in range(4)
            ]
            loop = replay(ps.SyncPolicy.ssp(s), tasks)
            g = max(g for _, g in loop.gap_trace)
            worst[s] = max(worst[s], g)
            gap_ok &= g <= s
    ok = same_bsp and blocks == 0 and same_asp and gap_ok
    return ok, (f"SSP(0)==BSP pushes: {same_bsp}; SSP(inf) blocks={blocks}, trace==ASP: {same_asp}; "
                f"max gap per s over 50 runs: {worst}")


# --------------------------------------------------------------------------- 7


def check_7():
    seed, lr, dropout = 7, 0.1, 0.2
    data = tr.generate(seed, 160, 3, 16)
    net = tr.ConvNet(3)
    fleet = pl.FleetSpec(0, 1, 160, 8, 1.0)
    schedule = sc.build("dual", [1], [lr], [16], [dropout], fleet, CostModel(1e-4, 1e-2),
                        factor_scheme="none")
    job = ps.TrainJob(net, data, data, CostModel(1e-4, 1e-2))
    result = ps.run(job, ps.SyncPolicy.bsp(), schedule, 1, seed, record_trajectory=True)

    alloc = schedule.sub_stages[0].plan
    (part,) = tr.shard(len(data), alloc, epoch=1, seed=seed)
    images = data.at_resolution(16)
    rng = tr.worker_rng(seed, 0, 1)
    w = net.init_params(seed)
    reference = []
    for idx in tr.batches(part.indices, alloc.large_batch):
        _, g = net.loss_and_grad(w, images[idx], data.labels[idx], dropout, rng)
        w = tr.sgd_step(w, g, lr)
        reference.append(w)
    traj = result.trajectory
    equal = len(traj) == len(reference) == 20 and all(
        np.array_equal(a, b) for a, b in zip(traj, reference)
    )
    return equal, f"{len(traj)} server steps vs {len(reference)} SGD steps, bitwise equal: {equal}"


# --------------------------------------------------------------------------- 8


def _relu_pattern(net, params, images, seed):
    _, cache = net.forward(params, images, 0.2, "train", np.random.default_rng(seed))
    return np.concatenate([(cache["z1"] > 0).ravel(), (cache["z2"] > 0).ravel()])


def gradient_check(seed, coords=50, h=1e-5):
    data = tr.generate(seed, 600, 3, 32)
    net = tr.ConvNet(3)
    images16 = data.at_resolution(16)
    params = net.init_params(seed)
    rng = np.random.default_rng(seed)
    for _ in range(60):  # move off the flat init, where gradients are ~1e-8
        idx = rng.integers(0, 600, 32)
        params = params - 0.5 * net.loss_and_grad(params, images16[idx], data.labels[idx])[1]
    x, y = data.at_resolution(16)[:8], data.labels[:8]

    def loss(p):
        return net.loss_and_grad(p, x, y, 0.2, np.random.default_rng(seed))

    _, grad = loss(params)
    slices = list(net.layer_slices().values())
    worst = 0.0
    taken = 0
    while taken < coords:
        sl = slices[taken % len(slices)]
        i = int(rng.integers(sl.start, sl.stop))
        step = np.zeros_like(params)
        step[i] = h
        if not np.array_equal(_relu_pattern(net, params + step, x, seed),
                              _relu_pattern(net, params - step, x, seed)):
            continue  # a ReLU kink lies inside [p-h, p+h]
        fd = (loss(params + step)[0] - loss(params - step)[0]) / (2 * h)
        worst = max(worst, abs(fd - grad[i]) / max(abs(fd), abs(grad[i]), 1e-12))
        taken += 1
    return worst


def check_8():
    errors = [gradient_check(seed) for seed in (3, 4, 5)]
    ok = max(errors) <= 1e-4
    return ok, "max relative error per seed " + ", ".join(f"{e:.2e}" for e in errors)


# --------------------------------------------------------------------------- 9


def check_9():
    start = time.perf_counter()
    data = tr.generate(0, 600, 3, 32)
    net = tr.ConvNet(3)
    ratios = []
    for seed in range(3):
        small, large = tr.gradient_variance_scan(
            net, net.init_params(seed), data, [4, 16], 500, seed, resolution=16
        )
        ratios.append(small.mean_variance / large.mean_variance)
    elapsed = time.perf_counter() - start
    ok = all(3 <= r <= 5 for r in ratios) and elapsed < 30
    return ok, f"Var(4)/Var(16) = {', '.join(f'{r:.2f}' for r in ratios)}; {elapsed:.1f} s"


# --------------------------------------------------------------------------- 10


SMOKE = dict(
    stage_epochs=[14, 10, 6], lrs=[0.2, 0.1, 0.03], resolutions=[16, 32], dropout_rates=[0.0, 0.1],
)


def linear_probe(train, evals):
    """Logistic regression on log-magnitude spectra: a shift-invariant linear oracle."""
    from sklearn.linear_model import LogisticRegression

    def features(d):
        spectrum = np.abs(np.fft.rfft2(d.at_resolution(d.base_resolution)))
        return np.log1p(spectrum.reshape(len(d), -1))

    clf = LogisticRegression(max_iter=2000).fit(features(train), train.labels)
    return clf.score(features(evals), evals.labels)


def check_10():
    start = time.perf_counter()
    seed = 0
    train = tr.generate(seed, 600, 3, 32)
    evals = tr.generate(seed + 1_000_003, 300, 3, 32)
    probe = linear_probe(train, evals)
    cost = CostModel(2e-4, 4e-3)
    fleet = pl.FleetSpec(3, 1, 600, 16, 1.05)
    schedule = sc.build("hybrid", fleet=fleet, cost=cost, large_batch_caps={16: 16, 32: 16}, **SMOKE)
    job = ps.TrainJob(tr.ConvNet(3), train, evals, cost)
    result = ps.run(job, ps.SyncPolicy.asp(), schedule, 30, seed)
    _, train_acc = job.net.evaluate(result.weights, train.at_resolution(32), train.labels)
    eval_acc = result.log.rows[-1].eval_accuracy
    elapsed = time.perf_counter() - start
    ok = probe >= 0.85 and train_acc >= 0.95 and eval_acc >= 0.85 and elapsed < 120
    return ok, (f"probe eval {probe:.3f}; train acc {train_acc:.3f}, eval acc {eval_acc:.3f}; "
                f"{elapsed:.1f} s")


# --------------------------------------------------------------------------- 11


def check_11():
    cost = CostModel(5.65e-4, 0.0155)
    cifar = sc.build(
        "hybrid", [80, 40, 20], [0.2, 0.02, 0.002], [24, 32], [0.1, 0.2],
        pl.FleetSpec(3, 1, 50000, 560, 1.05), cost, large_batch_caps={24: 600, 32: 560},
    )
    spans = [(s.first_epoch, s.last_epoch) for s in cifar.sub_stages]
    want = [(1, 40), (41, 80), (81, 100), (101, 120), (121, 130), (131, 140)]
    cifar_ok = (
        spans == want
        and [s.large_batch for s in cifar.sub_stages] == [600, 560] * 3
        and [s.dropout_rate for s in cifar.sub_stages] == [0.1, 0.2] * 3
    )
    imagenet = sc.build(
        "hybrid", [60, 30, 15], [0.1, 0.01, 0.001], [160, 224, 288], [0.1, 0.2, 0.3],
        pl.FleetSpec(1, 3, 1281167, 740, 1.05), cost,
        large_batch_caps={160: 2330, 224: 1110, 288: 740},
    )
    net_ok = len(imagenet.sub_stages) == 9 and [
        s.large_batch for s in imagenet.sub_stages] == [2330, 1110, 740] * 3
    return cifar_ok and net_ok, (f"CIFAR boundaries {spans}; ImageNet {len(imagenet.sub_stages)} "
                                 f"sub-stages, B_L {[s.large_batch for s in imagenet.sub_stages[:3]]}")


# --------------------------------------------------------------------------- 12


def check_12():
    net = tr.ConvNet(10)
    sizes = [64, 128, 192, 256, 320, 384, 448, 512]
    exact_bad = 0
    worst_noisy = 0.0
    for r in (8, 16, 24, 32):
        model = fit_memory(tr.memory_profile(net, r, sizes))
        for budget in np.linspace(model.predict(1) * 1.01, model.predict(2000), 40):
            truth = 0
            while net.memory_bytes(r, truth + 1) / MIB <= budget:
                truth += 1
            exact_bad += max_batch(model, budget) != truth
        for seed in range(10):
            noisy = fit_memory(tr.memory_profile(net, r, sizes, 0.02, np.random.default_rng([seed, r])))
            for budget in (model.predict(256), model.predict(512), model.predict(1000)):
                truth = max_batch(model, budget)
                worst_noisy = max(worst_noisy, abs(max_batch(noisy, budget) - truth) / truth)
    ok = exact_bad == 0 and worst_noisy <= 0.05
    return ok, (f"exact accounting: {exact_bad} mismatches vs brute force over 160 budgets; "
                f"±2% noise worst relative error {worst_noisy:.4f}")


# --------------------------------------------------------------------------- 13


def check_13():
    cost = CostModel(5.65e-4, 0.0155)
    fleet = pl.FleetSpec(1, 3, 1281167, 740, 1.05)
    common = dict(stage_epochs=[60, 30, 15], lrs=[0.1, 0.01, 0.001], fleet=fleet, cost=cost)
    ladder = sc.build("hybrid", resolutions=[160, 224, 288], dropout_rates=[0.1, 0.2, 0.3],
                      large_batch_caps={160: 2330, 224: 1110, 288: 740}, **common)
    single = sc.build("hybrid", resolutions=[288], dropout_rates=[0.3],
                      large_batch_caps={288: 740}, **common)
    cmp_ = ts.compare_baseline(ladder, single, cost)

    rng = np.random.default_rng(13)
    small_fleet = pl.FleetSpec(3, 1, 40000, 256, 1.05)
    faster = 0
    for _ in range(20):
        top = int(rng.integers(64, 257))
        low = sorted({int(rng.integers(16, top)) for _ in range(int(rng.integers(1, 4)))})
        rungs = low + [top]
        caps = {r: max(32, int(256 * (top / r) ** 2 // 1)) for r in rungs}
        caps = {r: min(b, 4096) for r, b in caps.items()}
        kw = dict(stage_epochs=[4, 4], lrs=[0.1, 0.01], fleet=small_fleet, cost=cost)
        a = sc.build("hybrid", resolutions=rungs, dropout_rates=[0.1] * len(rungs),
                     large_batch_caps=caps, **kw)
        b = sc.build("hybrid", resolutions=[top], dropout_rates=[0.1],
                     large_batch_caps={top: caps[top]}, **kw)
        faster += ts.compare_baseline(a, b, cost).ratio < 1.0
    ok = cmp_.reduction >= 0.20 and faster == 20
    return ok, (f"160/224/288 ladder vs 288-only: {cmp_.reduction:.1%} less simulated time; "
                f"{faster}/20 random ladders faster than their top rung alone")


CHECKS = {i: globals()[f"check_{i}"] for i in range(1, 14)}


@pytest.mark.parametrize("number", sorted(CHECKS))
def test_acceptance_criterion(number):
    ok, detail = CHECKS[number]()
    report(number, ok, detail)


if __name__ == "__main__":
    failed = 0
    for number in sorted(CHECKS):
        try:
            report(number, *CHECKS[number]())
        except AssertionError:
            failed += 1
    sys.exit(1 if failed else 0)
