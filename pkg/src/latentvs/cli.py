"""Command-line entry point: one subcommand per pipeline stage plus the
planning, rollout, sweep, eval, and full-pipeline recipes.

Every failure class exits with its own code so scripts can branch on what
went wrong::

    0 success          5 bad checkpoint       8 sampler diverged
    1 other error      6 missing artifact     9 pipeline stage failed
    2 bad config       7 training diverged
    3 bad dataset file
    4 degenerate dataset
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from . import pipeline as pl
from .cmvae import load_cmvae, save_cmvae, train_cmvae
from .config import ExperimentConfig
from .control import run_closed_loop, run_open_loop_batch
from .data import generate_dataset, read_dataset, sample_spawn, write_dataset
from .diffusion import load_diffuser, save_diffuser, train_diffuser
from .errors import (
    CheckpointError,
    ConfigError,
    DatasetFormatError,
    DegenerateDatasetError,
    LatentVSError,
    MissingArtifactError,
    SamplerDivergedError,
    StageFailedError,
    TrainingDivergedError,
)
from .planner import fit_velocity_model, load_velocity_model, plan, save_velocity_model
from .world import RobotPose, World

_EXIT_CODES = (
    (ConfigError, 2),
    (DatasetFormatError, 3),
    (DegenerateDatasetError, 4),
    (CheckpointError, 5),
    (MissingArtifactError, 6),
    (TrainingDivergedError, 7),
    (SamplerDivergedError, 8),
    (StageFailedError, 9),
    (LatentVSError, 1),
)


def exit_code_for(err: LatentVSError) -> int:
    for cls, code in _EXIT_CODES:
        if isinstance(err, cls):
            return code
    return 1


# ------------------------------------------------------------------ plumbing


def _load_config(args) -> ExperimentConfig:
    config = ExperimentConfig.from_file(args.config) if args.config else ExperimentConfig()
    if getattr(args, "seed", None) is not None:
        config.run.seed = args.seed
    if getattr(args, "out", None) is not None and args.command in ("pipeline", "sweep", "eval"):
        config.run.out_dir = args.out
    config.validate()
    return config


def _artifacts_dir(args, config: ExperimentConfig) -> Path:
    return Path(getattr(args, "artifacts", None) or config.run.out_dir)


def _out_dir(args, default: Path) -> Path:
    out = Path(args.out) if getattr(args, "out", None) else default
    out.mkdir(parents=True, exist_ok=True)
    return out


def _default_file(args, attr: str, config: ExperimentConfig, name: str) -> Path:
    given = getattr(args, attr, None)
    return Path(given) if given else Path(config.run.out_dir) / name


# ------------------------------------------------------------- stage command


def cmd_gen_data(args, config: ExperimentConfig) -> int:
    if args.episodes is not None:
        config.data.episodes = args.episodes
        config.validate()
    out = _default_file(args, "out", config, pl.DATASET_FILE)
    out.parent.mkdir(parents=True, exist_ok=True)
    dataset = generate_dataset(config)
    write_dataset(dataset, out)
    print(f"wrote {len(dataset.records)} episodes to {out} "
          f"(raw returns [{dataset.return_min:.2f}, {dataset.return_max:.2f}])")
    return 0


def cmd_train_cmvae(args, config: ExperimentConfig) -> int:
    if args.epochs is not None:
        config.cmvae.epochs = args.epochs
    dataset = read_dataset(_default_file(args, "data", config, pl.DATASET_FILE))
    model = train_cmvae(dataset, config)
    out = _default_file(args, "out", config, pl.CMVAE_FILE)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_cmvae(model, out, config)
    print(f"saved CM-VAE to {out} (final loss {model.loss_curve[-1][0]:.4f})")
    return 0


def cmd_train_ddpm(args, config: ExperimentConfig) -> int:
    if args.steps is not None:
        config.ddpm.train_steps = args.steps
    dataset = read_dataset(_default_file(args, "data", config, pl.DATASET_FILE))
    cmvae = load_cmvae(_default_file(args, "cmvae", config, pl.CMVAE_FILE))
    params = train_diffuser(dataset, cmvae, config)
    out = _default_file(args, "out", config, pl.DDPM_FILE)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_diffuser(params, out, config)
    print(f"saved DDPM to {out} (val inverse-dynamics MSE "
          f"{params.metrics['val_inverse_mse']:.5f})")
    return 0


def cmd_fit_velocity(args, config: ExperimentConfig) -> int:
    if args.mode is not None:
        config.planner.velocity_mode = args.mode
        config.validate()
    dataset = read_dataset(_default_file(args, "data", config, pl.DATASET_FILE))
    cmvae = None
    if not args.no_decode:
        cmvae = load_cmvae(_default_file(args, "cmvae", config, pl.CMVAE_FILE))
    model = fit_velocity_model(
        dataset,
        config.planner.velocity_mode,
        cmvae=cmvae,
        dt=config.world.dt,
        v_min=config.planner.v_min,
        v_max=config.planner.v_max,
    )
    out = _default_file(args, "out", config, pl.VELOCITY_FILE)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_velocity_model(model, out)
    print(f"saved velocity model to {out} (mode {model.mode}, mean speed {model.v_avg:.3f} m/s)")
    return 0


# ------------------------------------------------------------ recipe command


def cmd_plan(args, config: ExperimentConfig) -> int:
    world = World(config.world)
    cmvae = load_cmvae(_default_file(args, "cmvae", config, pl.CMVAE_FILE))
    diffuser = load_diffuser(_default_file(args, "ddpm", config, pl.DDPM_FILE))
    if args.velocity:
        velocity = load_velocity_model(Path(args.velocity))
    else:
        dataset = read_dataset(_default_file(args, "data", config, pl.DATASET_FILE))
        velocity = fit_velocity_model(
            dataset,
            config.planner.velocity_mode,
            cmvae=cmvae,
            dt=config.world.dt,
            v_min=config.planner.v_min,
            v_max=config.planner.v_max,
        )

    if args.start_pose:
        start_pose = RobotPose(*args.start_pose)
    else:
        start_pose = pl.fixture_start(config)
    override = None if args.return_value == "auto" else float(args.return_value)
    current = world.render(start_pose)
    target = world.render(world.goal_pose(config.data.goal_standoff))

    traj, actions, diag = plan(
        current,
        target,
        cmvae,
        diffuser,
        velocity,
        config,
        seed=config.run.seed,
        return_override=override,
        omega=args.omega,
    )
    out = _out_dir(args, Path(config.run.out_dir) / "plan")
    np.savez(
        out / "plan.npz",
        trajectory=traj,
        actions=actions,
        col_target_dist=diag["col_target_dist"],
        col_goal_dist=diag["col_goal_dist"],
    )
    summary = {
        "return_used": diag["return_used"],
        "raw_return_estimate": diag["raw_return_estimate"],
        "norm_return_estimate": diag["norm_return_estimate"],
        "return_out_of_range": bool(diag["return_out_of_range"]),
        "velocity": diag["velocity"],
        "max_jump": diag["max_jump"],
        "terminal_goal_dist": diag["terminal_goal_dist"],
        "fp_start": [float(v) for v in diag["fp_start"]],
        "fp_goal": [float(v) for v in diag["fp_goal"]],
        "seed": diag["seed"],
    }
    with open(out / "plan.json", "w") as fh:
        json.dump(summary, fh, indent=2)
    Image.fromarray(pl._strip_image(cmvae, {diag["return_used"]: traj})).save(
        out / "plan_strip.png"
    )
    print(f"planned with R={diag['return_used']:.3f} "
          f"(max jump {diag['max_jump']:.3f} m, terminal {diag['terminal_goal_dist']:.3f} m) -> {out}")
    return 0


def cmd_rollout(args, config: ExperimentConfig) -> int:
    if args.nexec is not None:
        config.controller.n_exec = args.nexec
        config.validate()
    components = pl.load_components(config, _artifacts_dir(args, config))
    world = components.world
    goal_pose = world.goal_pose(config.data.goal_standoff)
    target_image = world.render(goal_pose)
    out = _out_dir(args, Path(config.run.out_dir) / "rollout")

    if args.mode == "open":
        results, stats = run_open_loop_batch(
            pl.fixture_start(config),
            target_image,
            args.episodes,
            components,
            config,
            seed=config.run.seed,
            goal_pose=goal_pose,
        )
        rows = [
            [i, r.seed, r.steps_executed, int(r.success),
             r.final_position_error, r.final_yaw_error, r.failure_stage or ""]
            for i, r in enumerate(results)
        ]
        header = ["run", "seed", "steps", "success", "final_position_error",
                  "final_yaw_error", "failure"]
        summary = {k: v for k, v in stats.items() if np.isscalar(v)}
    else:
        rng = np.random.default_rng(config.run.seed)
        seeds = np.random.SeedSequence(config.run.seed + 1).generate_state(args.episodes)
        rows, successes, errors = [], [], []
        for i in range(args.episodes):
            invisible = bool(rng.random() < config.data.invisible_frac)
            start = sample_spawn(world, config.data, rng, invisible, goal_pose)
            result = run_closed_loop(
                start, target_image, components, config, seed=int(seeds[i]), goal_pose=goal_pose
            )
            successes.append(result.success)
            errors.append(result.final_position_error)
            rows.append(
                [i, result.seed, int(invisible), result.steps_executed, result.replans,
                 int(result.success), result.final_position_error, result.final_yaw_error,
                 result.failure_stage or ""]
            )
        header = ["episode", "seed", "invisible", "steps", "replans", "success",
                  "final_position_error", "final_yaw_error", "failure"]
        summary = {
            "episodes": args.episodes,
            "success_rate": float(np.mean(successes)),
            "mean_final_position_error": float(np.mean(errors)),
        }

    with open(out / "episodes.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)
    with open(out / "summary.json", "w") as fh:
        json.dump(summary, fh, indent=2)
    print(f"{args.mode} rollout: {json.dumps(summary)} -> {out}")
    return 0


def cmd_sweep(args, config: ExperimentConfig) -> int:
    components = pl.load_components(config, _artifacts_dir(args, config))
    out = _out_dir(args, Path(config.run.out_dir) / "sweep")
    report = pl.cmd_sweep(config, components, out)
    print(f"sweep: admissible {report['admissible_interval']}, "
          f"estimated {report['estimated_return']:.3f}, "
          f"in band: {report['estimate_in_admissible']} -> {out}")
    return 0


def cmd_eval(args, config: ExperimentConfig) -> int:
    components = pl.load_components(config, _artifacts_dir(args, config))
    out = _out_dir(args, Path(config.run.out_dir) / "eval")
    report = pl.cmd_eval(config, components, out)
    print(f"eval: invisible success {report['invisible']['success_rate']:.2f}, "
          f"closed {report['closed_mean_position_error']:.3f} m vs "
          f"open {report['open_mean_position_error']:.3f} m -> {out}")
    return 0


def cmd_pipeline(args, config: ExperimentConfig) -> int:
    outcome = pl.cmd_pipeline(config)
    for stage, status in outcome.items():
        print(f"{stage}: {status}")
    return 0


# -------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI config file (defaults apply when omitted)")
    common.add_argument("--seed", type=int, help="override run.seed")
    common.add_argument("--out", help="output file or directory (command-specific)")

    parser = argparse.ArgumentParser(
        prog="latentvs", description="latent-diffusion visual servoing harness"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", parents=[common], help="generate the expert dataset")
    p.add_argument("--episodes", type=int, help="override data.episodes")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train-cmvae", parents=[common], help="train the cross-modal VAE")
    p.add_argument("--data", help="dataset path")
    p.add_argument("--epochs", type=int, help="override cmvae.epochs")
    p.set_defaults(func=cmd_train_cmvae)

    p = sub.add_parser("train-ddpm", parents=[common], help="train the latent diffuser")
    p.add_argument("--data", help="dataset path")
    p.add_argument("--cmvae", help="CM-VAE checkpoint path")
    p.add_argument("--steps", type=int, help="override ddpm.train_steps")
    p.set_defaults(func=cmd_train_ddpm)

    p = sub.add_parser("fit-velocity", parents=[common], help="fit the velocity model")
    p.add_argument("--data", help="dataset path")
    p.add_argument("--cmvae", help="CM-VAE checkpoint path")
    p.add_argument("--mode", choices=["regression", "average"], help="override planner.velocity_mode")
    p.add_argument("--no-decode", action="store_true",
                   help="use recorded feature poses instead of CM-VAE decodings")
    p.set_defaults(func=cmd_fit_velocity)

    p = sub.add_parser("plan", parents=[common], help="plan once and dump the trajectory")
    p.add_argument("--cmvae", help="CM-VAE checkpoint path")
    p.add_argument("--ddpm", help="DDPM checkpoint path")
    p.add_argument("--data", help="dataset path (velocity fit fallback)")
    p.add_argument("--velocity", help="velocity model JSON path")
    p.add_argument("--start-pose", type=float, nargs=3, metavar=("X", "Y", "PSI"),
                   help="start pose (default: the standard fixture)")
    p.add_argument("--return", dest="return_value", default="auto",
                   help="conditioned return in [-1, 1], or 'auto' for the heuristic")
    p.add_argument("--omega", type=float, help="guidance weight override")
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("rollout", parents=[common], help="run closed- or open-loop episodes")
    p.add_argument("--mode", choices=["closed", "open"], required=True)
    p.add_argument("--episodes", type=int, default=10)
    p.add_argument("--nexec", type=int, help="override controller.n_exec")
    p.add_argument("--artifacts", help="directory holding the trained stack")
    p.set_defaults(func=cmd_rollout)

    p = sub.add_parser("sweep", parents=[common], help="return-conditioning sweep")
    p.add_argument("--artifacts", help="directory holding the trained stack")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("eval", parents=[common], help="closed/open evaluation recipe")
    p.add_argument("--artifacts", help="directory holding the trained stack")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("pipeline", parents=[common], help="run all stages with caching")
    p.set_defaults(func=cmd_pipeline)
    return parser


def main(argv=None) -> int:
    torch.set_num_threads(1)
    args = build_parser().parse_args(argv)
    try:
        config = _load_config(args)
        return args.func(args, config)
    except LatentVSError as err:
        print(f"error: {err}", file=sys.stderr)
        return exit_code_for(err)


if __name__ == "__main__":
    sys.exit(main())
