"""Command line entry point: ``tscimpute <subcommand> ...``."""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
import typing
from pathlib import Path

from .errors import ConfigError, DivergenceError, TscError
from .experiment import ExperimentConfig, build_flow, build_mask, build_network, run_experiment, sweep_missing_rates

log = logging.getLogger("tscimpute")


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON experiment config; flags override its values")
    hints = typing.get_type_hints(ExperimentConfig)
    for f in dataclasses.fields(ExperimentConfig):
        flag = "--" + f.name.replace("_", "-")
        hint = str(hints[f.name])
        if "list" in hint or "tuple" in hint:
            p.add_argument(flag, dest=f.name, nargs="+", type=float if "float" in hint else int, default=None)
        elif "bool" in hint:
            p.add_argument(flag, dest=f.name, default=None, type=lambda s: s.lower() in ("1", "true", "yes"))
        elif "dict" in hint:
            p.add_argument(flag, dest=f.name, default=None, type=json.loads, help="JSON object")
        elif "float" in hint:
            p.add_argument(flag, dest=f.name, type=float, default=None)
        elif "int" in hint:
            p.add_argument(flag, dest=f.name, type=int, default=None)
        else:
            p.add_argument(flag, dest=f.name, default=None)


def _config_from_args(args) -> ExperimentConfig:
    data = json.loads(Path(args.config).read_text()) if args.config else {}
    for f in dataclasses.fields(ExperimentConfig):
        value = getattr(args, f.name, None)
        if value is not None:
            data[f.name] = value
    return ExperimentConfig.from_dict(data)


def cmd_gen_net(args) -> None:
    from .road_network import LaneParams, build_grid, save_network

    lp = LaneParams(args.length, args.free_flow_steps, args.capacity, args.sat_flow)
    net = build_grid(args.rows, args.cols, lp)
    save_network(net, args.out)
    print(f"wrote {args.rows}x{args.cols} network ({len(net.lanes)} lanes) to {args.out}")


def cmd_gen_flow(args) -> None:
    from .road_network import load_network
    from .traffic_sim import generate_gaussian_flow, save_flow

    net = load_network(args.net)
    flow = generate_gaussian_flow(net, args.mean_rate, args.std_rate, args.horizon, tuple(args.turn_probs), rng_seed=args.seed)
    save_flow(flow, args.out)
    print(f"wrote {len(flow)} arrivals to {args.out}")


def cmd_pretrain_reward(args) -> None:
    from .agents import tune_fixed_plan
    from .imputation import PretrainConfig, collect_pretrain_samples, pretrain_reward_model

    cfg = _config_from_args(args)
    seed = cfg.seeds[0]
    net = build_network(cfg)
    flow = build_flow(cfg, net, seed)
    mask = build_mask(cfg, net, seed)
    plan = tune_fixed_plan(net, flow, cfg.fixed_candidates, seed, cfg.horizon, cfg.dt)
    data = collect_pretrain_samples(net, flow, mask, cfg.pretrain_epochs, seed, cfg.horizon, cfg.controller_config(), plan)
    model, test_mse = pretrain_reward_model(data, PretrainConfig(rng_seed=seed))
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    data.save(out / "pretrain_dataset.csv")
    model.save(out / "reward_model.npz")
    var = float(data.rewards[data.test_idx].var()) if len(data.test_idx) else float("nan")
    print(f"samples {len(data)}  test mse {test_mse:.4f}  test reward variance {var:.4f}")


def cmd_train(args) -> None:
    cfg = _config_from_args(args)
    rows, _ = run_experiment(cfg)
    for r in rows:
        if r.phase == "eval":
            print(f"seed {r.seed} {r.strategy} missing {r.missing_rate:.4f}: greedy avg travel time {r.avg_travel_time:.2f}")


def cmd_eval(args) -> None:
    from .agents import tune_fixed_plan
    from .controllers import Controller, Strategy, evaluate, load_checkpoints
    from .imputation import RewardModel

    cfg = _config_from_args(args)
    for seed in cfg.seeds:
        net = build_network(cfg)
        flow = build_flow(cfg, net, seed)
        mask = build_mask(cfg, net, seed)
        plan = tune_fixed_plan(net, flow, cfg.fixed_candidates, seed, cfg.horizon, cfg.dt)
        ctrl = Controller(Strategy(cfg.strategy), net, mask, cfg.controller_config(), seed=seed, fixed_plan=plan)
        ckpt = Path(args.checkpoints or Path(cfg.output_dir) / "checkpoints") / f"seed_{seed}"
        if ctrl.strategy.learning:
            load_checkpoints(ctrl, ckpt)
        if cfg.reward_model_path:
            ctrl.reward_model = RewardModel.load(cfg.reward_model_path)
        m = evaluate(ctrl, net, flow, mask, cfg.horizon)
        print(f"seed {seed} {cfg.strategy}: avg travel time {m.avg_travel_time:.2f}, throughput {m.throughput}")


def cmd_sweep(args) -> None:
    cfg = _config_from_args(args)
    adjacency = [bool(int(a)) for a in args.adjacency]
    result = sweep_missing_rates(cfg, args.rates, adjacency, args.strategies)
    for row in result["table"]:
        print(",".join(map(str, row)))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tscimpute", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-net", help="write a grid network file")
    p.add_argument("--rows", type=int, default=4)
    p.add_argument("--cols", type=int, default=4)
    p.add_argument("--length", type=float, default=300.0)
    p.add_argument("--free-flow-steps", type=int, default=11)
    p.add_argument("--capacity", type=int, default=40)
    p.add_argument("--sat-flow", type=int, default=2)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_net)

    p = sub.add_parser("gen-flow", help="write a synthetic Gaussian flow file")
    p.add_argument("--net", required=True)
    p.add_argument("--mean-rate", type=float, default=6.0)
    p.add_argument("--std-rate", type=float, default=2.0)
    p.add_argument("--horizon", type=int, default=600)
    p.add_argument("--turn-probs", type=float, nargs=3, default=[0.1, 0.8, 0.1])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_flow)

    for name, func, help_ in (
        ("pretrain-reward", cmd_pretrain_reward, "collect IDQN-Fix samples and pretrain the reward model"),
        ("train", cmd_train, "train a strategy for every seed and write CSVs"),
        ("eval", cmd_eval, "greedy evaluation of saved checkpoints"),
        ("sweep", cmd_sweep, "missing-rate x adjacency x strategy sweep"),
    ):
        p = sub.add_parser(name, help=help_)
        _add_config_flags(p)
        p.set_defaults(func=func)
        if name == "eval":
            p.add_argument("--checkpoints", help="directory holding seed_<n>/ checkpoint folders")
        if name == "sweep":
            p.add_argument("--rates", type=float, nargs="+", default=[0.0625, 0.125, 0.1875, 0.25])
            p.add_argument("--adjacency", nargs="+", default=["0"], help="0 = non-adjacent, 1 = adjacent")
            p.add_argument("--strategies", nargs="+", default=["IdqnFix", "SdqnAll"])
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except ConfigError as exc:
        for problem in exc.problems:
            print(f"config error: {problem}", file=sys.stderr)
        return 2
    except DivergenceError as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return 3
    except (TscError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
