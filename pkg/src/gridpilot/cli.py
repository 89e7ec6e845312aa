"""Command-line entry points: scenario generation, training, evaluation.

Every subcommand reads a JSON config (--config), an optional seed override
(--seed), and an output directory (--out). Outputs are plain CSV/JSON plus
binary checkpoints, all byte-stable under a fixed seed; wall-clock latency
goes to a separate latency.json that is excluded from that guarantee.
Verbosity comes from the GRIDPILOT_LOG environment variable
(debug/info/warning/error).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np

from . import ddpg, dsse, runtime, scenario
from .env import EnvConfig, Env, RewardConfig
from .errors import GridPilotError
from .feeder import Feeder, resolve_feeder

log = logging.getLogger("gridpilot")


def _setup_logging():
    level = os.environ.get("GRIDPILOT_LOG", "warning").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")


def _load_config(path) -> dict:
    try:
        with open(path) as fh:
            return json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise GridPilotError(f"cannot read config {path}: {exc}") from exc


def _outdir(args) -> str:
    os.makedirs(args.out, exist_ok=True)
    return args.out


def _feeder_from(cfg: dict) -> Feeder:
    if "feeder" not in cfg:
        raise GridPilotError("config needs a 'feeder' entry (path or fixture name)")
    return resolve_feeder(cfg["feeder"])


def _gen_config(cfg: dict) -> scenario.GenConfig:
    raw = dict(cfg.get("scenario", {}))
    if "count" not in raw:
        raise GridPilotError("config needs scenario.count")
    for key in ("pv_to_load_ratio_range", "load_scale_range", "power_factor_range"):
        if key in raw:
            raw[key] = tuple(raw[key])
    return scenario.GenConfig(**raw)


def _reward_config(cfg: dict) -> RewardConfig:
    return RewardConfig(**cfg.get("reward", {}))


def _seed(cfg: dict, args) -> int:
    if args.seed is not None:
        return args.seed
    return int(cfg.get("seed", 0))


def _scenarios_from(cfg: dict, feeder: Feeder) -> scenario.ScenarioSet:
    if "scenario_file" not in cfg:
        raise GridPilotError("config needs 'scenario_file'")
    return scenario.read_scenario_set(cfg["scenario_file"], feeder)


def _write(path, text: str):
    with open(path, "w") as fh:
        fh.write(text)


def _write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def cmd_gen_scenarios(args) -> int:
    cfg = _load_config(args.config)
    feeder = _feeder_from(cfg)
    gen_cfg = _gen_config(cfg)
    seed = _seed(cfg, args)
    out = _outdir(args)

    sset = scenario.generate_scenario_set(feeder, gen_cfg, seed)
    csv_path = os.path.join(out, "scenarios.csv")
    scenario.write_scenario_set(sset, feeder, csv_path)
    _write_json(os.path.join(out, "summary.json"), {
        "command": "gen-scenarios", "count": len(sset), "seed": seed,
        "csv": "scenarios.csv", "feeder_fingerprint": feeder.fingerprint})
    print(f"wrote {len(sset)} scenarios to {csv_path}")
    return 0


def cmd_train_dsse(args) -> int:
    cfg = _load_config(args.config)
    feeder = _feeder_from(cfg)
    seed = _seed(cfg, args)
    out = _outdir(args)
    dcfg = dict(cfg.get("dsse", {}))
    noise_pct = float(dcfg.pop("noise_pct", 1.0))
    slack = float(cfg.get("slack_voltage", 1.0))

    sset = _scenarios_from(cfg, feeder)
    split_cfg = cfg.get("split", {"train_fraction": 0.8})
    train_set, test_set = scenario.split(
        sset, float(split_cfg.get("train_fraction", 0.8)),
        int(split_cfg.get("seed", seed)))

    if "hidden_layers" in dcfg:
        dcfg["hidden_layers"] = tuple(dcfg["hidden_layers"])
    hp = dsse.DsseHyperparams(seed=seed, **dcfg)
    train_pairs = dsse.build_training_pairs(train_set, feeder, noise_pct,
                                            slack_voltage=slack, seed=seed)
    test_pairs = dsse.build_training_pairs(test_set, feeder, noise_pct,
                                           slack_voltage=slack, seed=seed + 1)

    model, losses = dsse.train_dsse(train_pairs, hp, feeder)
    dsse.save_dsse(model, os.path.join(out, "dsse.ckpt"))
    _write(os.path.join(out, "dsse_loss.csv"),
           "epoch, loss\n" + "\n".join(f"{i},{v!r}" for i, v in enumerate(losses)) + "\n")
    metrics = dsse.evaluate_dsse(model, test_pairs)
    _write(os.path.join(out, "dsse_metrics.csv"), dsse.metrics_csv(metrics))
    _write_json(os.path.join(out, "summary.json"), {
        "command": "train-dsse", "seed": seed,
        "train_pairs": len(train_pairs), "test_pairs": len(test_pairs),
        "final_loss": losses[-1],
        "mag_mape_per_phase": metrics.mag_mape_per_phase,
        "angle_mae_per_phase": metrics.angle_mae_per_phase})
    print(f"trained estimator: mape {metrics.mag_mape_per_phase} "
          f"mae {metrics.angle_mae_per_phase}")
    return 0


def cmd_eval_dsse(args) -> int:
    cfg = _load_config(args.config)
    feeder = _feeder_from(cfg)
    seed = _seed(cfg, args)
    out = _outdir(args)
    noise_pct = float(cfg.get("dsse", {}).get("noise_pct", 1.0))
    slack = float(cfg.get("slack_voltage", 1.0))

    model = dsse.load_dsse(cfg["dsse_checkpoint"])
    if model.feeder_fingerprint != feeder.fingerprint:
        raise GridPilotError("estimator checkpoint does not match the feeder")
    sset = _scenarios_from(cfg, feeder)
    pairs = dsse.build_training_pairs(sset, feeder, noise_pct,
                                      slack_voltage=slack, seed=seed)
    metrics = dsse.evaluate_dsse(model, pairs)
    _write(os.path.join(out, "dsse_metrics.csv"), dsse.metrics_csv(metrics))
    _write_json(os.path.join(out, "summary.json"), {
        "command": "eval-dsse", "seed": seed, "pairs": len(pairs),
        "mag_mape_per_phase": metrics.mag_mape_per_phase,
        "angle_mae_per_phase": metrics.angle_mae_per_phase})
    print(f"mape {metrics.mag_mape_per_phase} mae {metrics.angle_mae_per_phase}")
    return 0


def _env_config(cfg: dict, feeder: Feeder, estimator) -> EnvConfig:
    env_raw = cfg.get("env", {})
    return EnvConfig(
        feeder=feeder, estimator=estimator,
        horizon=int(env_raw.get("horizon", 20)),
        measurement_noise_pct=float(env_raw.get("measurement_noise_pct", 0.0)),
        zone_map=np.array(env_raw["zone_map"], dtype=int) if "zone_map" in env_raw else None,
        slack_voltage=float(cfg.get("slack_voltage", 1.0)),
        reward=_reward_config(cfg))


def cmd_train_agent(args) -> int:
    cfg = _load_config(args.config)
    feeder = _feeder_from(cfg)
    seed = _seed(cfg, args)
    out = _outdir(args)

    estimator = None
    if cfg.get("dsse_checkpoint"):
        estimator = dsse.load_dsse(cfg["dsse_checkpoint"])
        if estimator.feeder_fingerprint != feeder.fingerprint:
            raise GridPilotError("estimator checkpoint does not match the feeder")

    sset = _scenarios_from(cfg, feeder)
    train_raw = dict(cfg.get("train", {}))
    train_cfg = ddpg.TrainConfig(seed=seed, **train_raw)
    env_cfg = _env_config(cfg, feeder, estimator)
    if env_cfg.horizon != train_cfg.horizon:
        env_cfg.horizon = train_cfg.horizon

    env = Env(env_cfg)
    nets, trajectory = ddpg.train(env, list(sset), train_cfg)
    ddpg.save_agent(os.path.join(out, "agent.ckpt"), nets, train_cfg,
                    feeder_fingerprint=feeder.fingerprint)
    _write(os.path.join(out, "reward_trajectory.csv"),
           ddpg.trajectory_csv(trajectory, train_cfg))
    _write_json(os.path.join(out, "summary.json"), {
        "command": "train-agent", "seed": seed, "episodes": train_cfg.episodes,
        "first10_mean": float(np.mean(trajectory[:10])) if len(trajectory) >= 10 else None,
        "last10_mean": float(np.mean(trajectory[-10:])) if len(trajectory) >= 10 else None,
        "final_reward": trajectory[-1] if trajectory else None})
    print(f"trained agent over {train_cfg.episodes} episodes; "
          f"final episode reward {trajectory[-1]:.4g}")
    return 0


def _load_agent_for(cfg: dict, feeder: Feeder):
    nets, train_cfg, _, meta = ddpg.load_agent(cfg["agent_checkpoint"])
    fp = meta.get("feeder_fingerprint", "")
    if fp and fp != feeder.fingerprint:
        raise GridPilotError("agent checkpoint does not match the feeder")
    return nets, train_cfg


def cmd_evaluate(args) -> int:
    cfg = _load_config(args.config)
    feeder = _feeder_from(cfg)
    seed = _seed(cfg, args)
    out = _outdir(args)

    nets, _ = _load_agent_for(cfg, feeder)
    estimator = dsse.load_dsse(cfg["dsse_checkpoint"]) if cfg.get("dsse_checkpoint") else None
    sset = _scenarios_from(cfg, feeder)
    noise_pct = float(cfg.get("env", {}).get("measurement_noise_pct", 0.0))

    report = runtime.evaluate(nets, estimator, feeder, list(sset),
                              reward_cfg=_reward_config(cfg),
                              slack_voltage=float(cfg.get("slack_voltage", 1.0)),
                              measurement_noise_pct=noise_pct, seed=seed)
    _write(os.path.join(out, "eval_profile.csv"), report.profile_csv())
    _write_json(os.path.join(out, "summary.json"),
                {"command": "evaluate", "seed": seed, **report.summary()})
    _write_json(os.path.join(out, "latency.json"),
                {"p99_ms": report.latency_p99_ms, "mean_ms": report.latency_mean_ms})
    s = report.summary()
    print(f"baseline violations {s['scenarios_violating_baseline']}/{s['scenario_count']} "
          f"scenarios; controlled in-band fraction {s['in_band_fraction_controlled']:.4f}")
    return 0


def cmd_run_online(args) -> int:
    cfg = _load_config(args.config)
    feeder = _feeder_from(cfg)
    seed = _seed(cfg, args)
    out = _outdir(args)

    nets, train_cfg = _load_agent_for(cfg, feeder)
    estimator = dsse.load_dsse(cfg["dsse_checkpoint"]) if cfg.get("dsse_checkpoint") else None
    sset = _scenarios_from(cfg, feeder)

    apr_raw = dict(cfg.get("apr", {}))
    if "reference_reward" not in apr_raw:
        raise GridPilotError("config needs apr.reference_reward for run-online")
    apr = runtime.AprConfig(**apr_raw)

    noise_pct = float(cfg.get("env", {}).get("measurement_noise_pct", 0.0))
    run, _ = runtime.run_online(feeder, nets, estimator, list(sset), apr,
                                reward_cfg=_reward_config(cfg),
                                slack_voltage=float(cfg.get("slack_voltage", 1.0)),
                                measurement_noise_pct=noise_pct, seed=seed,
                                train_cfg=train_cfg)
    _write(os.path.join(out, "run_log.csv"), run.to_csv())
    _write_json(os.path.join(out, "summary.json"), {
        "command": "run-online", "seed": seed, "steps": len(run.records),
        "fine_tune_events": run.fine_tune_events,
        "mean_reward": float(np.mean([r.reward for r in run.records]))
        if run.records else None})
    _write_json(os.path.join(out, "latency.json"), run.latency_stats())
    print(f"ran {len(run.records)} online steps, "
          f"{len(run.fine_tune_events)} fine-tune events")
    return 0


def cmd_oracle(args) -> int:
    cfg = _load_config(args.config)
    feeder = _feeder_from(cfg)
    seed = _seed(cfg, args)
    out = _outdir(args)
    n_grid = int(cfg.get("oracle", {}).get("n_grid", 201))
    sset = _scenarios_from(cfg, feeder)
    reward_cfg = _reward_config(cfg)
    slack = float(cfg.get("slack_voltage", 1.0))

    lines = ["scenario_id, best_action, best_reward"]
    for sc in sset:
        best_a, best_r = runtime.oracle_best_action(feeder, sc, reward_cfg,
                                                    n_grid=n_grid, slack_voltage=slack)
        lines.append(f"{sc.id},{best_a!r},{best_r!r}")
    _write(os.path.join(out, "oracle.csv"), "\n".join(lines) + "\n")
    _write_json(os.path.join(out, "summary.json"), {
        "command": "oracle", "seed": seed, "n_grid": n_grid, "scenarios": len(sset)})
    print(f"oracle evaluated {len(sset)} scenarios at {n_grid} grid points")
    return 0


_COMMANDS = {
    "gen-scenarios": cmd_gen_scenarios,
    "train-dsse": cmd_train_dsse,
    "eval-dsse": cmd_eval_dsse,
    "train-agent": cmd_train_agent,
    "evaluate": cmd_evaluate,
    "run-online": cmd_run_online,
    "oracle": cmd_oracle,
}


def main(argv=None) -> int:
    _setup_logging()
    parser = argparse.ArgumentParser(
        prog="gridpilot",
        description="Feeder voltage control sandbox: power flow, state "
                    "estimation, and reinforcement-learned inverter dispatch.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in _COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="JSON config file")
        p.add_argument("--seed", type=int, default=None,
                       help="override the config seed")
        p.add_argument("--out", required=True, help="output directory")
    args = parser.parse_args(argv)

    try:
        return _COMMANDS[args.command](args)
    except GridPilotError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
