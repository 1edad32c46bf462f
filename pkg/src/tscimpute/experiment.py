"""Experiment configuration, seeded runs, sweeps and CSV output."""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .agents import EpsilonSchedule, tune_fixed_plan
from .controllers import Controller, ControllerConfig, Strategy, evaluate, save_checkpoints, train_episode
from .errors import ConfigError, ConstraintError
from .imputation import PretrainConfig, RewardModel, collect_pretrain_samples, pretrain_reward_model
from .observation import ObservationMask, sample_mask
from .road_network import LaneParams, RoadNetwork, build_grid
from .traffic_sim import FlowSpec, generate_gaussian_flow, load_flow

log = logging.getLogger(__name__)

RESULT_COLUMNS = ["seed", "strategy", "missing_rate", "episode", "phase", "epsilon", "avg_travel_time", "throughput"]
DELAY_COLUMNS = ["seed", "strategy", "missing_rate", "intersection", "row", "col", "observed", "mean_queue", "visits"]
STANDARD_RATES = (0.0, 0.0625, 0.125, 0.1875, 0.25)


@dataclass
class ExperimentConfig:
    rows: int = 4
    cols: int = 4
    lane_params: dict = field(default_factory=lambda: dataclasses.asdict(LaneParams()))
    flow_file: str | None = None
    mean_rate: float = 6.0
    std_rate: float = 2.0
    turn_probs: tuple[float, float, float] = (0.1, 0.8, 0.1)
    strategy: str = "FixFix"
    n_missing: int | None = 1
    missing_rate: float | None = None
    unobserved: list[int] | None = None
    allow_adjacent: bool = False
    episodes: int = 20
    horizon: int = 600
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2])
    dt: int = 10
    epsilon: float = 0.1
    epsilon_min: float = 0.01
    epsilon_decay: float = 0.995
    gamma: float = 0.95
    learning_rate: float = 1e-4
    updates_per_decision: int = 4
    target_sync_episodes: int = 5
    fixed_candidates: list[int] = field(default_factory=lambda: [1, 2, 3, 4])
    reward_model_path: str | None = None
    pretrain_epochs: int = 12
    output_dir: str = "runs/default"

    def __post_init__(self):
        self.turn_probs = tuple(self.turn_probs)

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - names)
        if unknown:
            raise ConfigError([f"unknown config field {u!r}" for u in unknown])
        cfg = cls(**data)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def validate(self) -> None:
        problems = []
        if self.rows < 1:
            problems.append("rows must be >= 1")
        if self.cols < 1:
            problems.append("cols must be >= 1")
        try:
            LaneParams(**self.lane_params).validate()
        except (TypeError, ValueError) as exc:
            problems.append(f"lane_params: {exc}")
        try:
            Strategy(self.strategy)
        except ValueError:
            problems.append(f"strategy {self.strategy!r} is not one of {[s.value for s in Strategy]}")
        if self.episodes < 1:
            problems.append("episodes must be >= 1")
        if self.horizon < 1:
            problems.append("horizon must be >= 1")
        if not self.seeds:
            problems.append("seeds must not be empty")
        if self.dt < 1:
            problems.append("dt must be >= 1")
        if not 0 <= self.epsilon_min <= self.epsilon <= 1:
            problems.append("need 0 <= epsilon_min <= epsilon <= 1")
        if not 0 < self.epsilon_decay <= 1:
            problems.append("epsilon_decay must be in (0, 1]")
        if not 0 <= self.gamma <= 1:
            problems.append("gamma must be in [0, 1]")
        if not self.learning_rate > 0:
            problems.append("learning_rate must be positive")
        if self.flow_file is None and not self.mean_rate > 0:
            problems.append("mean_rate must be positive")
        if not self.fixed_candidates or any(d < 1 for d in self.fixed_candidates):
            problems.append("fixed_candidates must be non-empty positive durations")
        n = self.rows * self.cols
        if self.unobserved is not None and any(not 0 <= k < n for k in self.unobserved):
            problems.append(f"unobserved ids must lie in [0, {n})")
        if self.missing_rate is not None:
            try:
                n_missing_for_rate(n, self.missing_rate)
            except ConfigError as exc:
                problems.extend(exc.problems)
        if self.n_missing is not None and not 0 <= self.n_missing < n:
            problems.append(f"n_missing must lie in [0, {n})")
        try:
            strat = Strategy(self.strategy)
            if strat.imputes_rewards and self.reward_model_path is None and self.pretrain_epochs < 1:
                problems.append(f"{self.strategy} needs reward_model_path or pretrain_epochs >= 1")
        except ValueError:
            pass
        if problems:
            raise ConfigError(problems)

    def controller_config(self) -> ControllerConfig:
        return ControllerConfig(
            dt=self.dt,
            gamma=self.gamma,
            learning_rate=self.learning_rate,
            epsilon=self.epsilon,
            epsilon_min=self.epsilon_min,
            epsilon_decay=self.epsilon_decay,
            updates_per_decision=self.updates_per_decision,
            target_sync_episodes=self.target_sync_episodes,
        )


def n_missing_for_rate(n_intersections: int, rate: float) -> int:
    exact = rate * n_intersections
    n = int(round(exact))
    if not math.isclose(exact, n, abs_tol=1e-6):
        raise ConfigError([f"missing rate {rate} gives a non-integral {exact:g} of {n_intersections} intersections"])
    if not 0 <= n < n_intersections:
        raise ConfigError([f"missing rate {rate} is out of range for {n_intersections} intersections"])
    return n


@dataclass
class ResultRow:
    seed: int
    strategy: str
    missing_rate: float
    episode: int
    phase: str  # "train" or "eval"
    epsilon: float
    avg_travel_time: float
    throughput: int

    def as_list(self) -> list:
        return [self.seed, self.strategy, f"{self.missing_rate:.4f}", self.episode, self.phase, f"{self.epsilon:.6f}", f"{self.avg_travel_time:.6f}", self.throughput]


def build_network(cfg: ExperimentConfig) -> RoadNetwork:
    return build_grid(cfg.rows, cfg.cols, LaneParams(**cfg.lane_params))


def build_flow(cfg: ExperimentConfig, net: RoadNetwork, seed: int) -> FlowSpec:
    if cfg.flow_file:
        return load_flow(cfg.flow_file, net)
    return generate_gaussian_flow(net, cfg.mean_rate, cfg.std_rate, cfg.horizon, tuple(cfg.turn_probs), rng_seed=seed)


def build_mask(cfg: ExperimentConfig, net: RoadNetwork, seed: int) -> ObservationMask:
    if cfg.unobserved is not None:
        return ObservationMask.from_unobserved(net, cfg.unobserved)
    if cfg.missing_rate is not None:
        n_missing = n_missing_for_rate(net.n_intersections, cfg.missing_rate)
    else:
        n_missing = cfg.n_missing or 0
    return sample_mask(net, n_missing, cfg.allow_adjacent, rng_seed=seed)


def prepare_reward_model(cfg: ExperimentConfig, net, flow, mask, seed: int, fixed_plan) -> tuple[RewardModel, float | None]:
    if cfg.reward_model_path:
        return RewardModel.load(cfg.reward_model_path), None
    data = collect_pretrain_samples(net, flow, mask, cfg.pretrain_epochs, rng_seed=seed, horizon=cfg.horizon, config=cfg.controller_config(), fixed_plan=fixed_plan)
    return pretrain_reward_model(data, PretrainConfig(rng_seed=seed))


@dataclass
class RunOutput:
    rows: list[ResultRow]
    delay_rows: list[list]
    epsilon_rows: list[list]
    controllers: dict[int, Controller]


def run_seed(cfg: ExperimentConfig, seed: int, checkpoint_dir: Path | None = None) -> RunOutput:
    """Train one strategy under one seed and evaluate it greedily."""
    strategy = Strategy(cfg.strategy)
    net = build_network(cfg)
    flow = build_flow(cfg, net, seed)
    mask = build_mask(cfg, net, seed)
    plan = tune_fixed_plan(net, flow, cfg.fixed_candidates, seed, cfg.horizon, cfg.dt)
    reward_model = None
    if strategy.imputes_rewards and mask.unobserved:
        reward_model, test_mse = prepare_reward_model(cfg, net, flow, mask, seed, plan)
        log.info("seed %d reward model test mse %s", seed, test_mse)
    ctrl = Controller(strategy, net, mask, cfg.controller_config(), seed=seed, fixed_plan=plan, reward_model=reward_model)

    rate = mask.missing_rate
    rows, eps_rows = [], []
    # open-loop plans do not learn: a single (evaluation) episode describes them
    episodes = 0 if strategy is Strategy.FixFix else cfg.episodes
    for e in range(episodes):
        eps = ctrl.eps.epsilon
        m = train_episode(ctrl, net, flow, mask, cfg.horizon)
        rows.append(ResultRow(seed, strategy.value, rate, e + 1, "train", eps, m.avg_travel_time, m.throughput))
        # epsilon_log holds the schedule value after the episode's decay
        eps_rows.append([seed, strategy.value, e + 1, f"{ctrl.eps.epsilon:.6f}"])
        log.info("seed %d %s episode %d att %.2f", seed, strategy.value, e + 1, m.avg_travel_time)
    m = evaluate(ctrl, net, flow, mask, cfg.horizon)
    rows.append(ResultRow(seed, strategy.value, rate, max(episodes, 1), "eval", 0.0, m.avg_travel_time, m.throughput))
    delay_rows = []
    for k in range(net.n_intersections):
        r, c = net.intersections[k].grid_pos
        delay_rows.append(
            [seed, strategy.value, f"{rate:.4f}", k, r, c, int(k in mask.observed), f"{m.per_intersection_delay[k]:.6f}", m.per_intersection_visits[k]]
        )
    if checkpoint_dir is not None and strategy.learning:
        save_checkpoints(ctrl, checkpoint_dir / f"seed_{seed}")
    return RunOutput(rows, delay_rows, eps_rows, {seed: ctrl})


def _write_csv(path: Path, header: list[str], rows: list[list]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def summarize(rows: list[ResultRow]) -> list[list]:
    """Mean and std of the final greedy evaluation across seeds, per strategy/rate."""
    groups: dict[tuple[str, float], list[float]] = {}
    for r in rows:
        if r.phase == "eval":
            groups.setdefault((r.strategy, r.missing_rate), []).append(r.avg_travel_time)
    out = []
    for (strategy, rate), vals in sorted(groups.items()):
        std = f"{np.std(vals, ddof=1):.6f}" if len(vals) >= 2 else ""
        out.append([strategy, f"{rate:.4f}", len(vals), f"{np.mean(vals):.6f}", std, f"{np.median(vals):.6f}"])
    return out


def run_experiment(cfg: ExperimentConfig, write: bool = True) -> tuple[list[ResultRow], RunOutput]:
    """Run every seed; writes results, summary, delay and epsilon CSVs plus checkpoints."""
    cfg.validate()
    out_dir = Path(cfg.output_dir)
    if write:
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    combined = RunOutput([], [], [], {})
    incomplete = out_dir / "INCOMPLETE"
    try:
        for seed in cfg.seeds:
            part = run_seed(cfg, seed, out_dir / "checkpoints" if write else None)
            combined.rows += part.rows
            combined.delay_rows += part.delay_rows
            combined.epsilon_rows += part.epsilon_rows
            combined.controllers.update(part.controllers)
    except Exception as exc:
        if write:
            _write_outputs(out_dir, combined)
            incomplete.write_text(f"{type(exc).__name__}: {exc}\n")
        raise
    if write:
        _write_outputs(out_dir, combined)
        if incomplete.exists():
            incomplete.unlink()
    return combined.rows, combined


def _write_outputs(out_dir: Path, run: RunOutput) -> None:
    _write_csv(out_dir / "results.csv", RESULT_COLUMNS, [r.as_list() for r in run.rows])
    _write_csv(out_dir / "summary.csv", ["strategy", "missing_rate", "n_seeds", "mean_att", "std_att", "median_att"], summarize(run.rows))
    _write_csv(out_dir / "delay_by_intersection.csv", DELAY_COLUMNS, run.delay_rows)
    _write_csv(out_dir / "epsilon_log.csv", ["seed", "strategy", "episode", "epsilon"], run.epsilon_rows)


def sweep_missing_rates(base_cfg: ExperimentConfig, rates, adjacency_modes, strategies, write: bool = True) -> dict:
    """Cartesian sweep over (rate, adjacency, strategy, seed).

    FixFix is always run per cell as the baseline for the relative-decrease
    table. Cells whose adjacency constraint cannot be met are reported as
    unavailable instead of aborting the sweep.
    """
    n = base_cfg.rows * base_cfg.cols
    for rate in rates:
        n_missing_for_rate(n, rate)
    out_dir = Path(base_cfg.output_dir)
    run_rows: list[list] = []
    table: list[list] = []
    decrease: list[list] = []
    strategies = [Strategy(s).value for s in strategies]
    for rate in rates:
        n_missing = n_missing_for_rate(n, rate)
        for adjacent in adjacency_modes:
            cell_means: dict[str, float] = {}
            cell_rows: dict[str, list] = {}
            status = "ok"
            for strategy in dict.fromkeys(["FixFix", *strategies]):
                cfg = dataclasses.replace(
                    base_cfg,
                    strategy=strategy,
                    n_missing=n_missing,
                    missing_rate=None,
                    unobserved=None,
                    allow_adjacent=bool(adjacent),
                    output_dir=str(out_dir / f"rate{rate:.4f}_adj{int(bool(adjacent))}_{strategy}"),
                )
                try:
                    rows, _ = run_experiment(cfg, write=write)
                except ConstraintError as exc:
                    log.warning("cell rate=%s adjacent=%s unavailable: %s", rate, adjacent, exc)
                    status = "unavailable"
                    break
                finals = [r for r in rows if r.phase == "eval"]
                cell_rows[strategy] = finals
                cell_means[strategy] = float(np.mean([r.avg_travel_time for r in finals]))
            if status != "ok":
                for strategy in strategies:
                    table.append([f"{rate:.4f}", n_missing, int(bool(adjacent)), strategy, "", "", "", "unavailable"])
                    decrease.append([f"{rate:.4f}", int(bool(adjacent)), strategy, "", "unavailable"])
                continue
            fix_mean = cell_means["FixFix"]
            for strategy in strategies:
                finals = cell_rows[strategy]
                vals = [r.avg_travel_time for r in finals]
                for r in finals:
                    run_rows.append([f"{rate:.4f}", n_missing, int(bool(adjacent)), strategy, r.seed, f"{r.avg_travel_time:.6f}", r.throughput])
                std = f"{np.std(vals, ddof=1):.6f}" if len(vals) >= 2 else ""
                table.append([f"{rate:.4f}", n_missing, int(bool(adjacent)), strategy, f"{np.mean(vals):.6f}", std, f"{fix_mean:.6f}", "ok"])
                pct = 100.0 * (fix_mean - np.mean(vals)) / fix_mean if fix_mean > 0 else 0.0
                decrease.append([f"{rate:.4f}", int(bool(adjacent)), strategy, f"{pct:.6f}", "ok"])
    if write:
        out_dir.mkdir(parents=True, exist_ok=True)
        _write_csv(out_dir / "sweep_runs.csv", ["missing_rate", "n_missing", "adjacent", "strategy", "seed", "avg_travel_time", "throughput"], run_rows)
        _write_csv(out_dir / "table.csv", ["missing_rate", "n_missing", "adjacent", "strategy", "mean_att", "std_att", "fixfix_mean_att", "status"], table)
        _write_csv(out_dir / "decrease_vs_fixfix.csv", ["missing_rate", "adjacent", "strategy", "decrease_pct", "status"], decrease)
    return {"runs": run_rows, "table": table, "decrease": decrease}


def epsilon_after(cfg: ExperimentConfig, n: int) -> float:
    return EpsilonSchedule.value_after(n, cfg.epsilon, cfg.epsilon_min, cfg.epsilon_decay)
