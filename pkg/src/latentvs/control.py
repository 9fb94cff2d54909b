"""Closed- and open-loop execution of diffusion plans in the simulator.

Closed loop is receding-horizon: render the live view, plan, execute the
first ``n_exec`` actions, repeat until the decoded feature pose matches the
goal's within the arrival thresholds or the replan budget runs out. Open loop
samples a batch of independent plans once and executes each action sequence
to the end without feedback.

Arrival is judged purely from decodings — the distance between the current
and goal decoded feature poses and their relative-yaw difference — never from
simulator ground truth; poses are used only for evaluation metrics.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .config import ExperimentConfig
from .diffusion import DiffuserParams
from .errors import LatentVSError
from .planner import (
    PlanRequest,
    VelocityModel,
    features_to_cartesian,
    inpaint_sample_batch,
    plan,
    plan_condition,
)
from .world import Action, FeaturePose, RobotPose, World, wrap_angle


@dataclass
class Components:
    """Trained pieces the controller wires together."""

    world: World
    cmvae: object
    diffuser: DiffuserParams
    velocity_model: VelocityModel


@dataclass
class EpisodeResult:
    steps_executed: int
    replans: int
    replan_returns: list[float]
    final_position_error: float
    final_yaw_error: float
    success: bool
    seed: int
    failure_stage: str | None = None
    poses: np.ndarray | None = None            # (steps+1, 3) executed pose trace
    plan_actions: list = field(default_factory=list)   # full (N, 3) action plan per replan
    executed_actions: np.ndarray | None = None  # (steps, 3) actions as sent


def _decoded_feature(cmvae, image: np.ndarray) -> FeaturePose:
    z = cmvae.encode_mean_np(image)
    return FeaturePose(*cmvae.decode_feature_np(z[:4]))


def _arrived(fp_now: FeaturePose, fp_goal: FeaturePose, config: ExperimentConfig) -> bool:
    carts = features_to_cartesian(np.stack([fp_now.as_array(), fp_goal.as_array()]))
    dist = float(np.linalg.norm(carts[0] - carts[1]))
    yaw = abs(wrap_angle(fp_now.gamma - fp_goal.gamma))
    return dist < config.controller.arrive_dist and yaw < config.controller.arrive_yaw


def _final_errors(pose: RobotPose, goal_pose: RobotPose | None) -> tuple[float, float]:
    if goal_pose is None:
        return math.nan, math.nan
    position = math.hypot(pose.x - goal_pose.x, pose.y - goal_pose.y)
    yaw = abs(wrap_angle(pose.psi - goal_pose.psi))
    return position, yaw


def run_closed_loop(
    start_pose: RobotPose,
    target_image: np.ndarray,
    components: Components,
    config: ExperimentConfig,
    seed: int | None = None,
    goal_pose: RobotPose | None = None,
) -> EpisodeResult:
    """Receding-horizon episode. Final errors are measured against
    ``goal_pose`` (the pose the target image was rendered from) when given;
    arrival decisions never consult it."""
    seed = config.run.seed if seed is None else seed
    ccfg = config.controller
    world, cmvae = components.world, components.cmvae
    plan_seeds = [int(s) for s in np.random.SeedSequence(seed).generate_state(ccfg.max_replans)]

    target_latent = cmvae.encode_mean_np(target_image)
    fp_goal = FeaturePose(*cmvae.decode_feature_np(target_latent[:4]))

    pose = start_pose
    poses = [np.array([pose.x, pose.y, pose.psi])]
    replan_returns: list[float] = []
    plan_log: list[np.ndarray] = []
    executed: list[np.ndarray] = []
    success = False
    failure_stage = None

    for replan in range(ccfg.max_replans):
        image = world.render(pose)
        if _arrived(_decoded_feature(cmvae, image), fp_goal, config):
            success = True
            break
        try:
            _, actions, diagnostics = plan(
                image,
                None,
                cmvae,
                components.diffuser,
                components.velocity_model,
                config,
                seed=plan_seeds[replan],
                target_latent=target_latent,
            )
        except LatentVSError as err:
            failure_stage = f"plan: {err}"
            break
        replan_returns.append(diagnostics["return_used"])
        plan_log.append(actions)
        for action in actions[: ccfg.n_exec]:
            executed.append(action)
            pose = world.step(pose, Action(*action))
            poses.append(np.array([pose.x, pose.y, pose.psi]))
    else:
        success = _arrived(_decoded_feature(cmvae, world.render(pose)), fp_goal, config)

    if failure_stage is not None:
        success = False
    position_err, yaw_err = _final_errors(pose, goal_pose)
    return EpisodeResult(
        steps_executed=len(executed),
        replans=len(replan_returns),
        replan_returns=replan_returns,
        final_position_error=position_err,
        final_yaw_error=yaw_err,
        success=success,
        seed=seed,
        failure_stage=failure_stage,
        poses=np.stack(poses),
        plan_actions=plan_log,
        executed_actions=np.stack(executed) if executed else np.zeros((0, 3)),
    )


def run_open_loop_batch(
    start_pose: RobotPose,
    target_image: np.ndarray,
    count: int,
    components: Components,
    config: ExperimentConfig,
    seed: int | None = None,
    goal_pose: RobotPose | None = None,
) -> tuple[list[EpisodeResult], dict]:
    """Sample ``count`` independent plans (distinct sampler seeds) from one
    start, execute each fully without replanning, and report per-run results
    plus batch statistics."""
    seed = config.run.seed if seed is None else seed
    world, cmvae, params = components.world, components.cmvae, components.diffuser
    run_seeds = [int(s) for s in np.random.SeedSequence(seed).generate_state(count)]

    start_image = world.render(start_pose)
    z_start = cmvae.encode_mean_np(start_image)
    z_goal = cmvae.encode_mean_np(target_image)
    condition = plan_condition(
        z_start, z_goal, cmvae, params, components.velocity_model, config.data.discount
    )
    return_used = condition["return_clamped"]
    fp_goal = condition["fp_goal"]

    results: list[EpisodeResult] = []
    try:
        requests = [PlanRequest(z_start, z_goal, return_used, seed=s) for s in run_seeds]
        trajectories = inpaint_sample_batch(requests, params)
        znorm = params.normalize_latent(trajectories).astype(np.float32)
        z_t = torch.from_numpy(znorm)
        with torch.no_grad():
            actions = params.inv_model(
                z_t[:, :-1].reshape(-1, params.latent_dim),
                z_t[:, 1:].reshape(-1, params.latent_dim),
            ).numpy().reshape(count, params.horizon, 3)
    except LatentVSError as err:
        for run_seed in run_seeds:
            results.append(
                EpisodeResult(
                    steps_executed=0,
                    replans=1,
                    replan_returns=[return_used],
                    final_position_error=math.nan,
                    final_yaw_error=math.nan,
                    success=False,
                    seed=run_seed,
                    failure_stage=f"sample: {err}",
                )
            )
        return results, _batch_stats(results)

    for run, run_seed in enumerate(run_seeds):
        pose = start_pose
        poses = [np.array([pose.x, pose.y, pose.psi])]
        try:
            for action in actions[run]:
                pose = world.step(pose, Action(*action))
                poses.append(np.array([pose.x, pose.y, pose.psi]))
            arrived = _arrived(_decoded_feature(cmvae, world.render(pose)), fp_goal, config)
            failure = None
        except LatentVSError as err:
            arrived, failure = False, f"execute: {err}"
        position_err, yaw_err = _final_errors(pose, goal_pose)
        results.append(
            EpisodeResult(
                steps_executed=len(poses) - 1,
                replans=1,
                replan_returns=[return_used],
                final_position_error=position_err,
                final_yaw_error=yaw_err,
                success=arrived,
                seed=run_seed,
                failure_stage=failure,
                poses=np.stack(poses),
                plan_actions=[actions[run]],
                executed_actions=actions[run].copy(),
            )
        )
    return results, _batch_stats(results)


def _batch_stats(results: list[EpisodeResult]) -> dict:
    ok = [r for r in results if r.failure_stage is None]
    stats = {
        "count": len(results),
        "failed": len(results) - len(ok),
        "success_rate": float(np.mean([r.success for r in ok])) if ok else 0.0,
    }
    errors = np.array([r.final_position_error for r in ok], dtype=float)
    yaws = np.array([r.final_yaw_error for r in ok], dtype=float)
    if ok and np.isfinite(errors).all():
        stats["mean_final_position_error"] = float(errors.mean())
        stats["std_final_position_error"] = float(errors.std())
        stats["mean_final_yaw_error"] = float(yaws.mean())
        stats["position_errors"] = errors
        stats["yaw_errors"] = yaws
    paths = [r.poses for r in ok if r.poses is not None]
    if paths and len({p.shape for p in paths}) == 1:
        stacked = np.stack(paths)
        stats["mean_path"] = stacked.mean(axis=0)
        stats["std_path"] = stacked.std(axis=0)
    return stats
