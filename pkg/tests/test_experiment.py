import csv
import dataclasses
import json

import pytest

import tscimpute.experiment as experiment
from tscimpute.cli import main
from tscimpute.errors import ConfigError
from tscimpute.experiment import (
    ExperimentConfig,
    epsilon_after,
    n_missing_for_rate,
    run_experiment,
    sweep_missing_rates,
)
from tscimpute.road_network import load_network
from tscimpute.traffic_sim import load_flow


def small(tmp_path, **kw):
    base = dict(
        rows=2,
        cols=2,
        strategy="IdqnFix",
        episodes=2,
        horizon=60,
        seeds=[0, 1],
        fixed_candidates=[1, 2],
        pretrain_epochs=1,
        output_dir=str(tmp_path / "run"),
    )
    base.update(kw)
    return ExperimentConfig.from_dict(base)


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# ---------------------------------------------------------------- configuration


def test_validation_lists_every_problem():
    with pytest.raises(ConfigError) as err:
        ExperimentConfig.from_dict({"episodes": 0, "seeds": [], "strategy": "Bogus", "gamma": 2.0})
    text = " ".join(err.value.problems)
    assert len(err.value.problems) >= 4
    for word in ("episodes", "seeds", "Bogus", "gamma"):
        assert word in text


def test_unknown_field_rejected():
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"episdoes": 3})


def test_remedy_two_needs_reward_source():
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"strategy": "SdqnAll", "pretrain_epochs": 0})
    ExperimentConfig.from_dict({"strategy": "SdqnAll", "pretrain_epochs": 0, "reward_model_path": "rm.npz"})


def test_rates_map_to_counts():
    assert [n_missing_for_rate(16, r) for r in (0.0625, 0.125, 0.1875, 0.25)] == [1, 2, 3, 4]
    assert n_missing_for_rate(48, 0.25) == 12
    with pytest.raises(ConfigError):
        n_missing_for_rate(16, 0.1)


def test_config_file_roundtrip(tmp_path):
    cfg = small(tmp_path)
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(cfg.to_dict()))
    assert ExperimentConfig.load(path) == cfg


# ---------------------------------------------------------------- runs


def test_fixfix_one_row_per_seed_no_checkpoints(tmp_path):
    cfg = small(tmp_path, strategy="FixFix", episodes=1, seeds=[0, 1, 2])
    rows, _ = run_experiment(cfg)
    assert len(rows) == 3 and {r.seed for r in rows} == {0, 1, 2}
    assert not (tmp_path / "run" / "checkpoints").exists()


def test_learning_run_outputs(tmp_path):
    cfg = small(tmp_path)
    rows, _ = run_experiment(cfg)
    out = tmp_path / "run"
    results = read_csv(out / "results.csv")
    assert len(results) == len(rows) == 2 * (cfg.episodes + 1)
    assert {r["phase"] for r in results} == {"train", "eval"}
    delay = read_csv(out / "delay_by_intersection.csv")
    assert len(delay) == 2 * 4 and "visits" in delay[0]
    assert (out / "checkpoints" / "seed_0" / "q_000.npz").exists()
    assert len(read_csv(out / "epsilon_log.csv")) == 2 * cfg.episodes
    assert not (out / "INCOMPLETE").exists()


def test_runs_are_byte_identical(tmp_path):
    a = small(tmp_path, output_dir=str(tmp_path / "a"), strategy="SdqnAll")
    b = dataclasses.replace(a, output_dir=str(tmp_path / "b"))
    run_experiment(a)
    run_experiment(b)
    for name in ("results.csv", "summary.csv", "delay_by_intersection.csv", "epsilon_log.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_epsilon_log_after_100_episodes(tmp_path):
    cfg = small(tmp_path, rows=1, cols=2, episodes=100, horizon=20, seeds=[0], n_missing=0)
    run_experiment(cfg)
    log = read_csv(tmp_path / "run" / "epsilon_log.csv")
    assert float(log[-1]["epsilon"]) == pytest.approx(0.0606, abs=1e-4)
    assert float(log[-1]["epsilon"]) == pytest.approx(epsilon_after(cfg, 100), abs=1e-6)


def test_failure_marks_incomplete(tmp_path, monkeypatch):
    real = experiment.run_seed

    def flaky(cfg, seed, checkpoint_dir=None):
        if seed == 1:
            raise RuntimeError("boom")
        return real(cfg, seed, checkpoint_dir)

    monkeypatch.setattr(experiment, "run_seed", flaky)
    with pytest.raises(RuntimeError):
        run_experiment(small(tmp_path))
    out = tmp_path / "run"
    assert (out / "INCOMPLETE").exists()
    assert {r["seed"] for r in read_csv(out / "results.csv")} == {"0"}


# ---------------------------------------------------------------- sweeps


def test_sweep_shape_and_baseline(tmp_path):
    cfg = small(tmp_path, episodes=1, output_dir=str(tmp_path / "sweep"))
    result = sweep_missing_rates(cfg, [0.25, 0.5], [False], ["FixFix", "IdqnFix"])
    assert len(result["runs"]) == 2 * 1 * 2 * 2
    for row in result["decrease"]:
        if row[2] == "FixFix":
            assert float(row[3]) == 0.0
    assert {r[1] for r in result["table"]} == {1, 2}
    assert (tmp_path / "sweep" / "table.csv").exists()
    assert (tmp_path / "sweep" / "decrease_vs_fixfix.csv").exists()


def test_sweep_marks_infeasible_cells(tmp_path):
    cfg = small(tmp_path, episodes=1, seeds=[0], output_dir=str(tmp_path / "sweep"))
    # three non-adjacent intersections cannot fit in a 2x2 grid
    result = sweep_missing_rates(cfg, [0.75], [False, True], ["IdqnFix"], write=False)
    status = {(r[2], r[3]): r[-1] for r in result["table"]}
    assert status[(0, "IdqnFix")] == "unavailable"
    assert status[(1, "IdqnFix")] == "ok"
    assert len(result["runs"]) == 1


# ---------------------------------------------------------------- CLI


def test_cli_generators(tmp_path, capsys):
    net_path = tmp_path / "net.json"
    flow_path = tmp_path / "flow.txt"
    assert main(["gen-net", "--rows", "2", "--cols", "3", "--out", str(net_path)]) == 0
    assert main(["gen-flow", "--net", str(net_path), "--horizon", "120", "--seed", "3", "--out", str(flow_path)]) == 0
    net = load_network(net_path)
    assert (net.rows, net.cols) == (2, 3)
    assert len(load_flow(flow_path, net)) > 0


def test_cli_train_eval_sweep(tmp_path, capsys):
    out = tmp_path / "cli"
    common = ["--rows", "2", "--cols", "2", "--horizon", "60", "--seeds", "0", "--fixed-candidates", "1", "2", "--output-dir", str(out)]
    assert main(["train", "--strategy", "SdqnAll", "--episodes", "1", "--pretrain-epochs", "1", *common]) == 0
    assert (out / "results.csv").exists()
    assert (out / "checkpoints" / "seed_0" / "reward_model.npz").exists()
    assert main(["eval", "--strategy", "SdqnAll", *common]) == 0
    assert "avg travel time" in capsys.readouterr().out
    sweep_out = tmp_path / "sweep"
    args = ["sweep", "--episodes", "1", "--rates", "0.25", "--strategies", "IdqnFix", *common[:-1], str(sweep_out)]
    assert main(args) == 0
    assert (sweep_out / "table.csv").exists()


def test_cli_pretrain_reward(tmp_path, capsys):
    out = tmp_path / "pre"
    args = ["pretrain-reward", "--rows", "2", "--cols", "2", "--horizon", "100", "--seeds", "0", "--pretrain-epochs", "2", "--output-dir", str(out)]
    assert main(args) == 0
    assert (out / "reward_model.npz").exists() and (out / "pretrain_dataset.csv").exists()
    assert "test mse" in capsys.readouterr().out


def test_cli_config_file_and_errors(tmp_path, capsys):
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps({"rows": 2, "cols": 2, "strategy": "FixFix", "horizon": 30, "seeds": [0], "output_dir": str(tmp_path / "c")}))
    assert main(["train", "--config", str(cfg_path)]) == 0
    assert main(["train", "--config", str(cfg_path), "--episodes", "0", "--gamma", "3"]) == 2
    err = capsys.readouterr().err
    assert "episodes" in err and "gamma" in err
