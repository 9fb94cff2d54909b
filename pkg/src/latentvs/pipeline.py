"""Experiment harness: stage orchestration with fingerprint caching, the
return-sweep and evaluation recipes, metrics CSV, and figure outputs.

The pipeline is a fixed DAG::

    gen-data -> train-cmvae -> train-ddpm -> fit-velocity -> sweep -> eval

Each stage records a config fingerprint and content hashes of its artifacts
in ``manifest.json``. A stage is skipped when its fingerprint matches, all of
its artifacts exist with matching hashes, and nothing upstream re-ran;
otherwise it runs again. Failures halt the pipeline with the stage name while
keeping every completed artifact on disk.

All figure files are regenerated bit-identically from the same artifacts and
seeds: matplotlib metadata that would embed tool versions is stripped, and
image strips are assembled in numpy and written through Pillow.
"""

from __future__ import annotations

import csv
import hashlib
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np
from PIL import Image

from .cmvae import load_cmvae, save_cmvae, train_cmvae
from .config import ExperimentConfig
from .control import Components, run_closed_loop, run_open_loop_batch
from .data import generate_dataset, read_dataset, sample_spawn, write_dataset
from .diffusion import load_diffuser, save_diffuser, train_diffuser
from .errors import MissingArtifactError, StageFailedError
from .planner import (
    fit_velocity_model,
    load_velocity_model,
    plan,
    plan_condition,
    save_velocity_model,
)
from .world import RobotPose, World

DATASET_FILE = "dataset.lvsd"
CMVAE_FILE = "cmvae.pt"
DDPM_FILE = "ddpm.pt"
VELOCITY_FILE = "velocity.json"
METRICS_FILE = "metrics.csv"
MANIFEST_FILE = "manifest.json"

METRICS_HEADER = ("experiment_id", "seed", "metric", "value", "units")


# ------------------------------------------------------------------ plumbing


def sha256_file(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def append_metrics(out_dir, experiment_id: str, seed: int, rows) -> None:
    """Append (metric, value, units) rows to the schema-stable metrics CSV."""
    path = Path(out_dir) / METRICS_FILE
    fresh = not path.exists()
    with open(path, "a", newline="") as fh:
        writer = csv.writer(fh)
        if fresh:
            writer.writerow(METRICS_HEADER)
        for metric, value, units in rows:
            writer.writerow([experiment_id, seed, metric, repr(float(value)), units])


def save_figure(fig, path) -> None:
    """Write a PNG without embedded tool-version metadata."""
    fig.savefig(path, dpi=110, metadata={"Software": None})
    plt.close(fig)


def _require(path, what: str) -> Path:
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(f"missing {what}: {path}")
    return path


def load_components(config: ExperimentConfig, artifacts_dir) -> Components:
    """Load the trained stack from a directory of standard artifact names."""
    artifacts_dir = Path(artifacts_dir)
    cmvae = load_cmvae(_require(artifacts_dir / CMVAE_FILE, "CM-VAE checkpoint"))
    diffuser = load_diffuser(_require(artifacts_dir / DDPM_FILE, "DDPM checkpoint"))
    velocity = load_velocity_model(_require(artifacts_dir / VELOCITY_FILE, "velocity model"))
    return Components(
        world=World(config.world), cmvae=cmvae, diffuser=diffuser, velocity_model=velocity
    )


def fixture_start(config: ExperimentConfig) -> RobotPose:
    run = config.run
    return RobotPose(run.fixture_start_x, run.fixture_start_y, run.fixture_start_psi)


# -------------------------------------------------------------------- stages


def stage_gen_data(config: ExperimentConfig, out_dir: Path) -> list[Path]:
    dataset = generate_dataset(config)
    path = out_dir / DATASET_FILE
    write_dataset(dataset, path)
    lengths = [len(rec) for rec in dataset.records]
    append_metrics(
        out_dir,
        "gen-data",
        config.run.seed,
        [
            ("episodes", len(dataset.records), "count"),
            ("mean_episode_length", float(np.mean(lengths)), "steps"),
            ("return_min", dataset.return_min, "raw return"),
            ("return_max", dataset.return_max, "raw return"),
        ],
    )
    return [path]


def stage_train_cmvae(config: ExperimentConfig, out_dir: Path) -> list[Path]:
    dataset = read_dataset(out_dir / DATASET_FILE)
    model = train_cmvae(dataset, config)
    path = out_dir / CMVAE_FILE
    save_cmvae(model, path, config)
    final = model.loss_curve[-1]
    append_metrics(
        out_dir,
        "train-cmvae",
        config.run.seed,
        [("final_total_loss", final[0], "loss"), ("final_kl", final[3], "nats")],
    )
    return [path]


def stage_train_ddpm(config: ExperimentConfig, out_dir: Path) -> list[Path]:
    dataset = read_dataset(out_dir / DATASET_FILE)
    cmvae = load_cmvae(out_dir / CMVAE_FILE)
    params = train_diffuser(dataset, cmvae, config)
    path = out_dir / DDPM_FILE
    save_diffuser(params, path, config)
    append_metrics(
        out_dir,
        "train-ddpm",
        config.run.seed,
        [
            ("final_train_loss", params.metrics["final_train_loss"], "loss"),
            ("val_inverse_mse", params.metrics["val_inverse_mse"], "action^2"),
            ("dataset_action_variance", params.metrics["dataset_action_variance"], "action^2"),
        ],
    )
    return [path]


def stage_fit_velocity(config: ExperimentConfig, out_dir: Path) -> list[Path]:
    dataset = read_dataset(out_dir / DATASET_FILE)
    cmvae = load_cmvae(out_dir / CMVAE_FILE)
    model = fit_velocity_model(
        dataset,
        config.planner.velocity_mode,
        cmvae=cmvae,
        dt=config.world.dt,
        v_min=config.planner.v_min,
        v_max=config.planner.v_max,
    )
    path = out_dir / VELOCITY_FILE
    save_velocity_model(model, path)
    append_metrics(
        out_dir,
        "fit-velocity",
        config.run.seed,
        [("mean_speed", model.v_avg, "m/s"), ("fell_back", float(model.fell_back), "bool")],
    )
    return [path]


def stage_sweep(config: ExperimentConfig, out_dir: Path) -> list[Path]:
    report = cmd_sweep(config, load_components(config, out_dir), out_dir / "sweep")
    append_metrics(
        out_dir,
        "sweep",
        config.run.seed,
        [
            ("estimated_return", report["estimated_return"], "normalized return"),
            ("admissible_low", report["admissible_interval"][0], "normalized return"),
            ("admissible_high", report["admissible_interval"][1], "normalized return"),
            ("estimate_in_admissible", float(report["estimate_in_admissible"]), "bool"),
        ],
    )
    sweep_dir = out_dir / "sweep"
    return [sweep_dir / "sweep_report.json", sweep_dir / "sweep.csv", sweep_dir / "sweep_strip.png"]


def stage_eval(config: ExperimentConfig, out_dir: Path) -> list[Path]:
    report = cmd_eval(config, load_components(config, out_dir), out_dir / "eval")
    append_metrics(
        out_dir,
        "eval",
        config.run.seed,
        [
            ("invisible_success_rate", report["invisible"]["success_rate"], "fraction"),
            ("visible_success_rate", report["visible"]["success_rate"], "fraction"),
            ("closed_mean_position_error", report["closed_mean_position_error"], "m"),
            ("open_mean_position_error", report["open_mean_position_error"], "m"),
            ("nondecreasing_fraction", report["invisible"]["nondecreasing_fraction"], "fraction"),
        ],
    )
    eval_dir = out_dir / "eval"
    return [
        eval_dir / "eval_report.json",
        eval_dir / "episodes.csv",
        eval_dir / "replan_returns.csv",
        eval_dir / "raw.npz",
        eval_dir / "open_loop_hist.png",
        eval_dir / "trajectories.png",
    ]


# --------------------------------------------------------------------- sweep


def _strip_image(cmvae, trajectories: dict[float, np.ndarray], columns: int = 8) -> np.ndarray:
    """Stack decoded image rows (one per return level) into a uint8 grid."""
    rows = []
    for level in sorted(trajectories):
        traj = trajectories[level]
        idx = np.linspace(0, traj.shape[0] - 1, columns).round().astype(int)
        decoded = cmvae.decode_image_np(traj[idx])
        tiles = [np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8) for img in decoded]
        pad = np.full((tiles[0].shape[0], 2, 3), 255, dtype=np.uint8)
        row = tiles[0]
        for tile in tiles[1:]:
            row = np.concatenate([row, pad, tile], axis=1)
        rows.append(row)
    pad = np.full((2, rows[0].shape[1], 3), 255, dtype=np.uint8)
    grid = rows[0]
    for row in rows[1:]:
        grid = np.concatenate([grid, pad, row], axis=0)
    return grid


def cmd_sweep(
    config: ExperimentConfig, components: Components | None = None, out_dir=None
) -> dict:
    """Plan across conditioned returns {-1.0, -0.8, ..., 1.0} at the standard
    fixture, score smoothness and terminal convergence per level, and report
    the admissible interval together with the return heuristic's estimate."""
    out_dir = Path(config.run.out_dir) / "sweep" if out_dir is None else Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if components is None:
        components = load_components(config, Path(config.run.out_dir))
    world, cmvae, params = components.world, components.cmvae, components.diffuser

    start_pose = fixture_start(config)
    start_image = world.render(start_pose)
    target_image = world.render(world.goal_pose(config.data.goal_standoff))
    z_start = cmvae.encode_mean_np(start_image)
    z_goal = cmvae.encode_mean_np(target_image)
    condition = plan_condition(
        z_start, z_goal, cmvae, params, components.velocity_model, config.data.discount
    )
    estimated = condition["return_clamped"]

    levels = [round(-1.0 + 0.2 * i, 1) for i in range(11)]
    plan_seeds = np.random.SeedSequence(config.run.seed).generate_state(
        len(levels) * config.run.level_plans
    )
    per_level = {}
    strip_trajs = {}
    for li, level in enumerate(levels):
        jumps, terminals, mean_dists = [], [], []
        for rep in range(config.run.level_plans):
            seed = int(plan_seeds[li * config.run.level_plans + rep])
            traj, _, diag = plan(
                start_image,
                None,
                cmvae,
                params,
                components.velocity_model,
                config,
                seed=seed,
                return_override=level,
                target_latent=z_goal,
            )
            jumps.append(diag["max_jump"])
            terminals.append(diag["terminal_goal_dist"])
            mean_dists.append(float(np.mean(diag["col_target_dist"])))
            if rep == 0:
                strip_trajs[level] = traj
        per_level[level] = {
            "max_jump": float(np.mean(jumps)),
            "terminal_dist": float(np.mean(terminals)),
            "mean_target_dist": float(np.mean(mean_dists)),
        }

    admissible = [
        level
        for level, row in per_level.items()
        if row["max_jump"] <= config.planner.smooth_jump_max
        and row["terminal_dist"] <= config.planner.converge_dist_max
    ]
    interval = (min(admissible), max(admissible)) if admissible else (np.nan, np.nan)
    in_band = bool(admissible) and interval[0] <= estimated <= interval[1]

    report = {
        "levels": levels,
        "per_level": {str(k): v for k, v in per_level.items()},
        "admissible_levels": admissible,
        "admissible_interval": [float(interval[0]), float(interval[1])],
        "estimated_return": float(estimated),
        "raw_return_estimate": float(condition["raw_return_estimate"]),
        "estimate_in_admissible": in_band,
        "plans_per_level": config.run.level_plans,
    }
    with open(out_dir / "sweep_report.json", "w") as fh:
        json.dump(report, fh, indent=2)
    with open(out_dir / "sweep.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["return_level", "max_jump", "terminal_dist", "mean_target_dist", "admissible"])
        for level in levels:
            row = per_level[level]
            writer.writerow(
                [level, row["max_jump"], row["terminal_dist"], row["mean_target_dist"], level in admissible]
            )
    Image.fromarray(_strip_image(cmvae, strip_trajs)).save(out_dir / "sweep_strip.png")
    return report


# ---------------------------------------------------------------------- eval


def _episode_row(stratum: str, index: int, result) -> list:
    return [
        stratum,
        index,
        result.seed,
        result.steps_executed,
        result.replans,
        int(result.success),
        result.final_position_error,
        result.final_yaw_error,
        result.failure_stage or "",
    ]


def _nondecreasing(values: list[float]) -> bool:
    return all(b >= a - 1e-9 for a, b in zip(values, values[1:]))


def _net_increase(values: list[float]) -> bool:
    return len(values) < 2 or values[-1] >= values[0] - 1e-9


def _slope_nonneg(values: list[float]) -> bool:
    if len(values) < 2:
        return True
    slope = np.polyfit(np.arange(len(values)), np.asarray(values), 1)[0]
    return bool(slope >= -1e-9)


def _stratum_report(closed, matched_open) -> dict:
    succ = [r for r in closed if r.success]
    invis_trend = [r for r in succ if len(r.replan_returns) >= 1]
    seqs = [r.replan_returns for r in invis_trend]
    return {
        "episodes": len(closed),
        "success_rate": float(np.mean([r.success for r in closed])) if closed else 0.0,
        "closed_mean_position_error": float(np.mean([r.final_position_error for r in closed])),
        "closed_mean_yaw_error": float(np.mean([r.final_yaw_error for r in closed])),
        "open_mean_position_error": float(np.mean([r.final_position_error for r in matched_open])),
        "nondecreasing_fraction": (
            float(np.mean([_nondecreasing(s) for s in seqs])) if seqs else 1.0
        ),
        # Softer readings of the same per-replan trend, for diagnostics: net
        # first-to-last movement and the sign of a least-squares slope.
        "net_increase_fraction": (
            float(np.mean([_net_increase(s) for s in seqs])) if seqs else 1.0
        ),
        "slope_nonneg_fraction": (
            float(np.mean([_slope_nonneg(s) for s in seqs])) if seqs else 1.0
        ),
        "mean_replans": float(np.mean([r.replans for r in closed])) if closed else 0.0,
    }


def _replan_table(closed_by_stratum: dict[str, list]) -> tuple[list[str], list[list]]:
    max_replans = max(
        (len(r.replan_returns) for rows in closed_by_stratum.values() for r in rows), default=0
    )
    header = ["scenario"] + [f"replan_{k}" for k in range(max_replans)]
    rows = []
    for stratum, results in closed_by_stratum.items():
        row: list = [stratum]
        for k in range(max_replans):
            vals = [r.replan_returns[k] for r in results if len(r.replan_returns) > k]
            row.append(float(np.mean(vals)) if vals else "")
        rows.append(row)
    return header, rows


def cmd_eval(config: ExperimentConfig, components: Components | None = None, out_dir=None) -> dict:
    """Closed-loop episodes over stratified random starts with matched
    single-plan open-loop runs, plus a many-sample open-loop batch from the
    standard fixture; emits the report, per-episode CSV, per-replan return
    table, error histogram, and trajectory figure."""
    out_dir = Path(config.run.out_dir) / "eval" if out_dir is None else Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if components is None:
        components = load_components(config, Path(config.run.out_dir))
    world = components.world

    goal_pose = world.goal_pose(config.data.goal_standoff)
    target_image = world.render(goal_pose)
    rng = np.random.default_rng(config.run.seed)
    episode_seeds = np.random.SeedSequence(config.run.seed + 1).generate_state(
        2 * config.run.eval_episodes
    )

    closed_by_stratum: dict[str, list] = {}
    open_by_stratum: dict[str, list] = {}
    episode_rows = []
    for si, (stratum, invisible) in enumerate([("visible", False), ("invisible", True)]):
        closed_results, open_results = [], []
        for i in range(config.run.eval_episodes):
            start = sample_spawn(world, config.data, rng, invisible, goal_pose)
            seed = int(episode_seeds[si * config.run.eval_episodes + i])
            closed = run_closed_loop(
                start, target_image, components, config, seed=seed, goal_pose=goal_pose
            )
            singles, _ = run_open_loop_batch(
                start, target_image, 1, components, config, seed=seed, goal_pose=goal_pose
            )
            closed_results.append(closed)
            open_results.append(singles[0])
            episode_rows.append(_episode_row(stratum, i, closed))
        closed_by_stratum[stratum] = closed_results
        open_by_stratum[stratum] = open_results

    fixture_results, fixture_stats = run_open_loop_batch(
        fixture_start(config),
        target_image,
        config.run.open_loop_samples,
        components,
        config,
        seed=config.run.seed,
        goal_pose=goal_pose,
    )

    all_closed = [r for rows in closed_by_stratum.values() for r in rows]
    all_open = [r for rows in open_by_stratum.values() for r in rows]
    report = {
        "visible": _stratum_report(closed_by_stratum["visible"], open_by_stratum["visible"]),
        "invisible": _stratum_report(closed_by_stratum["invisible"], open_by_stratum["invisible"]),
        "closed_mean_position_error": float(np.mean([r.final_position_error for r in all_closed])),
        "open_mean_position_error": float(np.mean([r.final_position_error for r in all_open])),
        "open_loop_fixture": {
            "count": fixture_stats["count"],
            "success_rate": fixture_stats["success_rate"],
            "mean_final_position_error": fixture_stats.get("mean_final_position_error", float("nan")),
            "std_final_position_error": fixture_stats.get("std_final_position_error", float("nan")),
        },
    }
    with open(out_dir / "eval_report.json", "w") as fh:
        json.dump(report, fh, indent=2)

    with open(out_dir / "episodes.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["stratum", "episode", "seed", "steps", "replans", "success",
             "final_position_error", "final_yaw_error", "failure"]
        )
        writer.writerows(episode_rows)

    header, rows = _replan_table(closed_by_stratum)
    with open(out_dir / "replan_returns.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)

    fixture_errors = np.array(
        [r.final_position_error for r in fixture_results if r.failure_stage is None]
    )
    closed_errors = np.array([r.final_position_error for r in all_closed])
    open_errors = np.array([r.final_position_error for r in all_open])
    np.savez(
        out_dir / "raw.npz",
        fixture_position_errors=fixture_errors,
        closed_position_errors=closed_errors,
        open_position_errors=open_errors,
        mean_path=fixture_stats.get("mean_path", np.zeros((0, 3))),
        std_path=fixture_stats.get("std_path", np.zeros((0, 3))),
    )

    fig, ax = plt.subplots(figsize=(5, 3.2))
    bins = np.arange(0.0, max(2.0, float(fixture_errors.max(initial=1.0))) + 0.2, 0.1)
    ax.hist(fixture_errors, bins=bins, color="#4878cf", edgecolor="white")
    ax.axvline(config.controller.arrive_dist, color="#d65f5f", linestyle="--", label="arrival")
    ax.set_xlabel("final position error [m]")
    ax.set_ylabel("runs")
    ax.legend()
    fig.tight_layout()
    save_figure(fig, out_dir / "open_loop_hist.png")

    fig, ax = plt.subplots(figsize=(4.4, 4.4))
    room = config.world.room_size
    ax.plot([0, room, room, 0, 0], [0, 0, room, room, 0], color="black", linewidth=1)
    for result in fixture_results[:12]:
        if result.poses is not None:
            ax.plot(result.poses[:, 0], result.poses[:, 1], color="#bbbbbb", linewidth=0.6)
    mean_path = fixture_stats.get("mean_path")
    if mean_path is not None:
        ax.plot(mean_path[:, 0], mean_path[:, 1], color="#4878cf", linewidth=1.8, label="mean path")
    ax.plot(goal_pose.x, goal_pose.y, marker="*", color="#d65f5f", markersize=12, label="goal")
    start = fixture_start(config)
    ax.plot(start.x, start.y, marker="o", color="#333333", label="start")
    ax.set_aspect("equal")
    ax.legend(loc="upper left", fontsize=8)
    fig.tight_layout()
    save_figure(fig, out_dir / "trajectories.png")
    return report


# ------------------------------------------------------------------ pipeline

STAGES = (
    ("gen-data", ("world", "data"), stage_gen_data, ()),
    ("train-cmvae", ("world", "data", "cmvae"), stage_train_cmvae, ("gen-data",)),
    ("train-ddpm", ("world", "data", "cmvae", "ddpm"), stage_train_ddpm, ("gen-data", "train-cmvae")),
    ("fit-velocity", ("world", "data", "cmvae", "planner"), stage_fit_velocity,
     ("gen-data", "train-cmvae")),
    ("sweep", ("world", "data", "cmvae", "ddpm", "planner", "run"), stage_sweep,
     ("gen-data", "train-cmvae", "train-ddpm", "fit-velocity")),
    ("eval", ("world", "data", "cmvae", "ddpm", "planner", "controller", "run"), stage_eval,
     ("gen-data", "train-cmvae", "train-ddpm", "fit-velocity")),
)


def _stage_fingerprint(config: ExperimentConfig, blocks) -> str:
    base = config.fingerprint(*blocks)
    return hashlib.sha256(f"{base}:seed={config.run.seed}".encode()).hexdigest()


def _artifacts_fresh(entry: dict, out_dir: Path) -> bool:
    for rel, digest in entry.get("artifacts", {}).items():
        path = out_dir / rel
        if not path.exists() or sha256_file(path) != digest:
            return False
    return True


def cmd_pipeline(config: ExperimentConfig) -> dict:
    """Run (or skip) every stage in order; returns {stage: "ran"|"skipped"}."""
    out_dir = Path(config.run.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest_path = out_dir / MANIFEST_FILE
    manifest = {}
    if manifest_path.exists():
        with open(manifest_path) as fh:
            manifest = json.load(fh)

    outcome = {}
    reran: set[str] = set()
    for name, blocks, runner, upstream in STAGES:
        fingerprint = _stage_fingerprint(config, blocks)
        entry = manifest.get(name)
        cached = (
            entry is not None
            and entry.get("fingerprint") == fingerprint
            and not (set(upstream) & reran)
            and _artifacts_fresh(entry, out_dir)
        )
        if cached:
            outcome[name] = "skipped"
            continue
        try:
            artifacts = runner(config, out_dir)
        except Exception as exc:
            with open(manifest_path, "w") as fh:
                json.dump(manifest, fh, indent=2)
            raise StageFailedError(name, exc) from exc
        manifest[name] = {
            "fingerprint": fingerprint,
            "artifacts": {
                str(Path(p).relative_to(out_dir)): sha256_file(p) for p in artifacts
            },
        }
        with open(manifest_path, "w") as fh:
            json.dump(manifest, fh, indent=2)
        outcome[name] = "ran"
        reran.add(name)
    return outcome
