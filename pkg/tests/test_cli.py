from __future__ import annotations

import json

import pytest

from dualbatch import cli
from dualbatch.errors import ConfigError

SMALL = {
    "n_train": 120, "n_eval": 60, "r_max": 16, "resolutions": [8, 16],
    "large_batch_caps": {"8": 16, "16": 16}, "stage_epochs": [2, 2], "lrs": [0.2, 0.05],
}


def write_config(tmp_path, **overrides):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps({**SMALL, **overrides}))
    return str(path)


def only_run(root):
    runs = sorted((root / "runs").iterdir())
    return runs[-1]


def test_plan_writes_json_and_sweep_table(tmp_path, capsys):
    cfg = write_config(tmp_path, total_data=50000, large_batch=256, cost={"a": 1e-4, "b": 1e-2})
    assert cli.main(["plan", "--config", cfg, "--k", "1.05", "--workers", "1,3",
                     "--out", str(tmp_path)]) == 0
    doc = json.loads((tmp_path / "plans" / "plan_k1.05_ns1_nl3.json").read_text())
    assert (doc["d_large"], doc["d_small"], doc["n_small"]) == (13125, 10625, 1)
    table = (tmp_path / "plans" / "plan_table_k1.05_n4.txt").read_text().splitlines()
    assert len(table) == 2 + 5  # header, rule, n_S = 0..4
    assert "(1, 3)" in capsys.readouterr().out


def test_schedule_boundaries(tmp_path):
    cfg = write_config(tmp_path)
    assert cli.main(["schedule", "--config", cfg, "--out", str(tmp_path)]) == 0
    doc = json.loads((tmp_path / "schedules" / "schedule_hybrid_k1.05.json").read_text())
    ranges = [sub["epochs"] for st in doc["stages"] for sub in st["sub_stages"]]
    assert ranges == [[1, 1], [2, 2], [3, 3], [4, 4]]
    assert [sub["resolution"] for st in doc["stages"] for sub in st["sub_stages"]] == [8, 16, 8, 16]
    assert (tmp_path / "schedules" / "schedule_hybrid_k1.05.png").exists()


def test_single_worker_training_is_reproducible_and_rerunnable(tmp_path):
    cfg = write_config(tmp_path, n_small=0, n_large=1, factor_scheme="none", policy="bsp")
    assert cli.main(["train", "--config", cfg, "--out", str(tmp_path / "a")]) == 0
    assert cli.main(["train", "--config", cfg, "--out", str(tmp_path / "b")]) == 0
    run_a, run_b = only_run(tmp_path / "a"), only_run(tmp_path / "b")
    metrics = (run_a / "metrics.csv").read_bytes()
    assert metrics == (run_b / "metrics.csv").read_bytes()
    assert len(metrics.decode().splitlines()) == 5
    for name in ("trace.csv", "model.npy", "metrics.png", "manifest.json"):
        assert (run_a / name).exists()

    manifest = run_a / "manifest.json"
    assert cli.main(["train", "--config", str(manifest), "--out", str(tmp_path / "c")]) == 0
    assert (only_run(tmp_path / "c") / "metrics.csv").read_bytes() == metrics
    assert (only_run(tmp_path / "c") / "trace.csv").read_bytes() == (run_a / "trace.csv").read_bytes()


def test_threaded_training_runs(tmp_path):
    cfg = write_config(tmp_path, stage_epochs=[1, 1], lrs=[0.2, 0.05], resolutions=[16],
                       dropout_rates=[0.0], large_batch_caps={"16": 16})
    assert cli.main(["train", "--config", cfg, "--threaded", "--policy", "ssp",
                     "--staleness", "1", "--out", str(tmp_path)]) == 0
    lines = (only_run(tmp_path) / "metrics.csv").read_text().splitlines()
    assert len(lines) == 3 and "nan" not in lines[1].split(",")[2]


def test_simulate_writes_report(tmp_path):
    cfg = write_config(tmp_path)
    assert cli.main(["simulate", "--config", cfg, "--policy", "ssp", "--staleness", "2",
                     "--out", str(tmp_path)]) == 0
    run = only_run(tmp_path)
    doc = json.loads((run / "sim_report.json").read_text())
    assert doc["policy"] == "ssp(2)" and doc["max_gap"] <= 2
    for name in ("trace.csv", "simulation.png", "gap.png", "manifest.json"):
        assert (run / name).exists()


def test_max_batch_table(tmp_path):
    cfg = write_config(tmp_path, memory_budget=2.0)
    assert cli.main(["max-batch", "--config", cfg, "--out", str(tmp_path)]) == 0
    lines = (tmp_path / "profiles" / "max_batch.csv").read_text().splitlines()
    assert lines[0] == "resolution,fixed_mib,per_sample_mib,budget_mib,max_batch"
    assert len(lines) == 3


def test_profile_writes_fits(tmp_path):
    cfg = write_config(tmp_path, profile_batch_sizes=[2, 4, 8], repeats=3,
                       memory_batch_sizes=[8, 16, 32])
    assert cli.main(["profile", "--config", cfg, "--out", str(tmp_path)]) == 0
    for name in ("cost_r8.json", "cost_r16.json", "timing_r8.csv", "memory.csv",
                 "memory_models.json", "memory.png"):
        assert (tmp_path / "profiles" / name).exists()


@pytest.mark.parametrize("overrides", [
    {"k": 0.9}, {"n_small": -1}, {"policy": "gossip"}, {"lrs": [0.1]},
    {"staleness": -2, "policy": "ssp"}, {"bogus": 1},
])
def test_bad_config_exits_with_config_code(tmp_path, overrides, capsys):
    cfg = write_config(tmp_path, **overrides)
    assert cli.main(["schedule", "--config", cfg, "--out", str(tmp_path)]) == cli.EXIT_CONFIG
    assert "config error" in capsys.readouterr().err


def test_malformed_workers_flag(tmp_path):
    assert cli.main(["plan", "--workers", "three", "--out", str(tmp_path)]) == cli.EXIT_CONFIG


def test_output_root_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv("DUALBATCH_OUT", str(tmp_path / "env"))
    assert cli.main(["plan", "--config", write_config(tmp_path)]) == 0
    assert any((tmp_path / "env" / "plans").iterdir())


def test_flags_override_file_over_defaults(tmp_path):
    cfg = cli.load_config(write_config(tmp_path, k=1.2, seed=5))
    args = cli.build_parser().parse_args(["plan", "--k", "1.1"])
    merged = cli.apply_flags(cfg, args)
    assert (merged.k, merged.seed, merged.classes) == (1.1, 5, cli.RunConfig().classes)


def test_config_round_trip():
    cfg = cli.RunConfig(seed=3, staleness=2, policy="ssp")
    assert cli.RunConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg
    with pytest.raises(ConfigError):
        cli.RunConfig.from_dict({"nope": 1})


def test_run_dirs_never_collide(tmp_path):
    a = cli.run_dir(tmp_path, 0)
    b = cli.run_dir(tmp_path, 0)
    assert a != b and a.exists() and b.exists()
