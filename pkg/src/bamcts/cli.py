"""Command-line entry point: dataset generation, ensemble fitting,
training, evaluation, and the verification suite.

Flag resolution order: CLI flag > BAMCTS_SEED (seed only) > config file >
built-in default. Exit codes: 0 ok, 1 failed check, 2 usage error.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from .ensemble import (
    EnsembleTrainConfig,
    TransitionDataset,
    fit_ensemble,
    load_ensemble,
    save_ensemble,
)
from .envs import BehaviorSpec, evaluate_policy, generate_dataset, make_env
from .errors import ConfigError
from .iteration import MetricsTable, TrainConfig, run_training
from .net import load_mlp, save_mlp
from .policy import GaussianPolicy
from .search import SearchConfig
from . import verify as verify_mod

logger = logging.getLogger("bamcts")


def _load_config(path: str | None) -> dict:
    if not path:
        return {}
    with open(path) as fh:
        return json.load(fh)


def _resolve(args, config: dict, key: str, default, cast=lambda x: x):
    """CLI flag (if given) > config file entry > default."""
    value = getattr(args, key.replace("-", "_"), None)
    if value is not None:
        return value
    if key in config:
        return cast(config[key])
    return default


def _resolve_seed(args, config: dict, default: int = 0) -> int:
    if getattr(args, "seed", None) is not None:
        return args.seed
    env_seed = os.environ.get("BAMCTS_SEED")
    if env_seed is not None:
        return int(env_seed)
    if "seed" in config:
        return int(config["seed"])
    return default


def _file_hash(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(path, config: dict, seeds: dict, outputs: dict, inputs: dict) -> None:
    manifest = {
        "config": config,
        "seeds": seeds,
        "outputs": {k: str(v) for k, v in outputs.items()},
        "input_hashes": {k: _file_hash(v) for k, v in inputs.items()},
        "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S"),
    }
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)


def load_manifest(path) -> dict:
    with open(path) as fh:
        return json.load(fh)


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_data(args) -> int:
    config = _load_config(args.config)
    env_name = _resolve(args, config, "env", None)
    if env_name is None:
        print("gen-data: --env is required", file=sys.stderr)
        return 2
    seed = _resolve_seed(args, config)
    quality = _resolve(args, config, "quality", "medium")
    n = _resolve(args, config, "n", 20000, int)
    out = Path(_resolve(args, config, "out", f"{env_name}-{quality}.bads"))

    env = make_env(env_name, seed)
    data = generate_dataset(env, BehaviorSpec(quality), n, seed)
    data.save(out)
    sidecar = out.with_suffix(out.suffix + ".json")
    with open(sidecar, "w") as fh:
        json.dump(data.info, fh, indent=1, sort_keys=True)
    print(f"wrote {len(data)} transitions to {out} (sidecar {sidecar})")
    print(
        "behavior mean return {behavior_mean_return:.4f} "
        "std {behavior_std_return:.4f}".format(**data.info)
    )
    return 0


def cmd_fit_model(args) -> int:
    config = _load_config(args.config)
    data_path = _resolve(args, config, "data", None)
    if data_path is None:
        print("fit-model: --data is required", file=sys.stderr)
        return 2
    k = _resolve(args, config, "k", 5, int)
    seed = _resolve_seed(args, config)
    out_dir = Path(_resolve(args, config, "out", "ensemble"))
    cfg = EnsembleTrainConfig(
        epochs=_resolve(args, config, "epochs", 60, int),
        batch_size=_resolve(args, config, "batch_size", 256, int),
        holdout_fraction=_resolve(args, config, "holdout", 0.1, float),
    )
    data = (
        TransitionDataset.load_csv(data_path)
        if str(data_path).endswith(".csv")
        else TransitionDataset.load(data_path)
    )
    ensemble = fit_ensemble(data, k, cfg, seed)
    save_ensemble(ensemble, out_dir)
    print(f"wrote {k} member checkpoints to {out_dir}")
    for i, nll in enumerate(ensemble.holdout_nll):
        print(f"member {i}: holdout nll {nll:.4f}")
    return 0


def _train_config(args, config: dict) -> TrainConfig:
    seed = _resolve_seed(args, config)
    search_cfg = SearchConfig(
        simulations=_resolve(args, config, "search_simulations", 50, int),
        max_depth=_resolve(args, config, "search_depth", 5, int),
        action_widening=_resolve(args, config, "alpha", 0.5, float),
        outcome_widening=_resolve(args, config, "beta", 0.5, float),
        uct_c=_resolve(args, config, "uct_c", 2.5, float),
        root_noise_frac=_resolve(args, config, "eta", 0.3, float),
        max_actions=_resolve(args, config, "n_a", 10, int),
        max_outcomes=_resolve(args, config, "n_s", 1, int),
    )
    penalty = getattr(args, "lambda_", None)
    if penalty is None:
        penalty = float(config.get("lambda", 1.0))
    workers = _resolve(args, config, "workers", 1, int)
    sequential = bool(getattr(args, "sequential", None)) or workers <= 1
    return TrainConfig(
        variant=_resolve(args, config, "variant", "ba-mcts"),
        search_fraction=_resolve(args, config, "rho", 0.1, float),
        rollout_horizon=_resolve(args, config, "horizon", 5, int),
        epochs=_resolve(args, config, "epochs", 30, int),
        states_per_epoch=_resolve(args, config, "states_per_epoch", 128, int),
        learner_steps=_resolve(args, config, "learner_steps", 200, int),
        batch_size=_resolve(args, config, "batch_size", 128, int),
        n_step=_resolve(args, config, "n_step", 5, int),
        gamma=_resolve(args, config, "gamma", 0.99, float),
        penalty_coeff=penalty,
        buffer_epochs=_resolve(args, config, "buffer_epochs", 5, int),
        warmup_epochs=_resolve(args, config, "warmup", 0, int),
        search=search_cfg,
        seed=seed,
        workers=workers,
        sequential=sequential,
    )


def cmd_train(args) -> int:
    config = _load_config(args.config)
    env_name = _resolve(args, config, "env", None)
    data_path = _resolve(args, config, "data", None)
    if env_name is None or data_path is None:
        print("train: --env and --data are required", file=sys.stderr)
        return 2
    model_dir = _resolve(args, config, "model", None)
    out_dir = Path(_resolve(args, config, "out", "run"))
    out_dir.mkdir(parents=True, exist_ok=True)

    cfg = _train_config(args, config)
    env = make_env(env_name, cfg.seed)
    data = TransitionDataset.load(data_path)
    ensemble = load_ensemble(model_dir) if model_dir else None

    table = run_training(cfg, data, env, ensemble)

    metrics_path = out_dir / "metrics.csv"
    metrics_path.write_text(table.to_csv())

    state = table.final_state
    policy_path = out_dir / "policy.bamc"
    value_path = out_dir / "value.bamc"
    bounds = (state.policy.log_std_min, state.policy.log_std_max)
    save_mlp(policy_path, state.policy.net, role="policy", log_std_bounds=bounds)
    save_mlp(value_path, state.value.net, role="value")
    save_mlp(out_dir / "critic1.bamc", state.critics.q1, role="critic1")
    save_mlp(out_dir / "critic2.bamc", state.critics.q2, role="critic2")

    final = table.rows[-1]
    summary = {
        "variant": cfg.variant,
        "final_10_mean_return": table.final_mean_return(10),
        "last_epoch_return": final["mean_return"],
        "epochs": cfg.epochs,
        "seed": cfg.seed,
    }
    with open(out_dir / "summary.json", "w") as fh:
        json.dump(summary, fh, indent=1, sort_keys=True)
    if args.emit_plot:
        plot_path = out_dir / "plot.csv"
        with open(plot_path, "w") as fh:
            fh.write("x,y,series\n")
            for row in table.rows:
                fh.write(f"{row['epoch']},{row['mean_return']:.6g},mean_return\n")
            for row in table.rows:
                fh.write(f"{row['epoch']},{row['mean_penalty']:.6g},mean_penalty\n")

    write_manifest(
        out_dir / "manifest.json",
        config=dataclasses.asdict(cfg),
        seeds={"seed": cfg.seed},
        outputs={"metrics": metrics_path, "policy": policy_path, "value": value_path},
        inputs={"data": data_path},
    )
    print(f"wrote metrics to {metrics_path}")
    print(
        f"final-10-epoch mean return: {summary['final_10_mean_return']:.4f} "
        f"({cfg.variant})"
    )
    return 0


def cmd_eval(args) -> int:
    config = _load_config(args.config)
    env_name = _resolve(args, config, "env", None)
    policy_path = _resolve(args, config, "policy", None)
    if env_name is None or policy_path is None:
        print("eval: --env and --policy are required", file=sys.stderr)
        return 2
    seed = _resolve_seed(args, config)
    episodes = _resolve(args, config, "episodes", 10, int)
    mode = _resolve(args, config, "mode", "mean")

    env = make_env(env_name, seed)
    mlp, role, bounds = load_mlp(policy_path)
    if role != "policy":
        print(f"eval: {policy_path} holds a {role!r} checkpoint, not a policy",
              file=sys.stderr)
        return 2
    policy = GaussianPolicy(mlp, env.action_low, env.action_high, *bounds)
    mean, std = evaluate_policy(env, policy, episodes, seed, mode)
    print(f"mean_return={mean:.6g} std_return={std:.6g} episodes={episodes}")
    return 0


def cmd_verify(args) -> int:
    results = verify_mod.run_all(
        samples=args.samples,
        seeds=args.seeds,
        simulations=args.simulations,
    )
    failures = 0
    for name, status, detail in results:
        print(f"check={name} status={status} detail={detail}")
        failures += status == "fail"
    print(f"summary: {len(results)} checks, {failures} failures")
    return 1 if failures else 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="bamcts",
        description="Bayes-adaptive MCTS for offline model-based RL",
    )
    parser.add_argument("--log-level", default="WARNING")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate an offline dataset")
    p.add_argument("--env")
    p.add_argument("--quality")
    p.add_argument("--n", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.add_argument("--config")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("fit-model", help="train the world-model ensemble")
    p.add_argument("--data")
    p.add_argument("--k", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--holdout", type=float)
    p.add_argument("--config")
    p.set_defaults(func=cmd_fit_model)

    p = sub.add_parser("train", help="run search-based policy iteration")
    p.add_argument("--env")
    p.add_argument("--data")
    p.add_argument("--model")
    p.add_argument("--variant", choices=("ba-mbrl", "ba-mcts", "ba-mcts-sl"))
    p.add_argument("--rho", type=float)
    p.add_argument("--lambda", dest="lambda_", type=float)
    p.add_argument("--horizon", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--states-per-epoch", type=int)
    p.add_argument("--learner-steps", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--warmup", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--workers", type=int)
    p.add_argument("--sequential", action="store_true", default=None)
    p.add_argument("--out")
    p.add_argument("--emit-plot", action="store_true")
    p.add_argument("--config")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a policy checkpoint")
    p.add_argument("--env")
    p.add_argument("--policy")
    p.add_argument("--episodes", type=int)
    p.add_argument("--mode", choices=("mean", "sample"))
    p.add_argument("--seed", type=int)
    p.add_argument("--config")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("verify", help="run the oracle verification suite")
    p.add_argument("--samples", type=int, default=100_000)
    p.add_argument("--seeds", type=int, default=100)
    p.add_argument("--simulations", type=int, default=5000)
    p.set_defaults(func=cmd_verify)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=getattr(logging, args.log_level.upper(), logging.WARNING))
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"missing file: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
