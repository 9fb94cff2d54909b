"""Planning: return-conditioned diffusion inpainting between the current and
goal latents, the constant-velocity return-estimation heuristic, and the
velocity-selection models that feed it.

Inpainting is a hard constraint: after the initial noise draw and after every
reverse step, column 0 is overwritten with the (standardized) start latent and
column N with the goal latent; the returned trajectory carries the raw
encoder latents at its endpoints bit-exactly.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass

import numpy as np
import torch

from .config import ExperimentConfig
from .diffusion import DiffuserParams, denoise_step
from .errors import SamplerDivergedError
from .world import FeaturePose, feature_to_cartesian, wrap_angle


@dataclass
class PlanRequest:
    z_start: np.ndarray
    z_goal: np.ndarray
    return_condition: float | None  # normalized return, or None for unconditional
    omega: float | None = None      # None -> the diffuser's trained guidance weight
    seed: int = 0


def features_to_cartesian(features: np.ndarray) -> np.ndarray:
    """(n, 4) feature-pose rows -> (n, 3) robot-frame target vectors."""
    features = np.atleast_2d(np.asarray(features, dtype=np.float64))
    r, theta, phi = features[:, 0], features[:, 1], features[:, 2]
    planar = r * np.cos(phi)
    return np.stack([planar * np.cos(theta), planar * np.sin(theta), r * np.sin(phi)], axis=1)


# --------------------------------------------------------------- inpainting


def inpaint_sample_batch(
    requests: list[PlanRequest],
    params: DiffuserParams,
    trace: list | None = None,
) -> np.ndarray:
    """Reverse-diffuse a batch of inpainted trajectories; returns
    (batch, N+1, d_z) raw (de-standardized) latents. Each request's noise
    stream is drawn from its own seed, so results are reproducible per seed
    for a fixed batch composition."""
    n_cols = params.horizon + 1
    dz = params.latent_dim
    rngs = [np.random.default_rng(req.seed) for req in requests]
    zs = np.stack([params.normalize_latent(req.z_start.astype(np.float32)) for req in requests])
    zg = np.stack([params.normalize_latent(req.z_goal.astype(np.float32)) for req in requests])
    zs_t = torch.from_numpy(zs.astype(np.float32))
    zg_t = torch.from_numpy(zg.astype(np.float32))

    x = torch.from_numpy(
        np.stack([rng.standard_normal((dz, n_cols)) for rng in rngs]).astype(np.float32)
    )
    x[:, :, 0] = zs_t
    x[:, :, -1] = zg_t

    conds = [req.return_condition for req in requests]
    cond_tensor = torch.tensor(
        [0.0 if c is None else float(c) for c in conds], dtype=torch.float32
    )
    cond_mask = torch.tensor([c is not None for c in conds])
    omegas = torch.tensor(
        [params.guidance if req.omega is None else float(req.omega) for req in requests],
        dtype=torch.float32,
    ).view(-1, 1, 1)

    b = len(requests)
    sqrt_ab = torch.from_numpy(np.sqrt(params.schedule.alpha_bar).astype(np.float32))
    sqrt_1m_ab = torch.from_numpy(np.sqrt(1.0 - params.schedule.alpha_bar).astype(np.float32))
    with torch.no_grad():
        for t in range(params.schedule.T, 0, -1):
            t_full = torch.full((b,), t, dtype=torch.long)
            both = torch.cat([x, x])
            t2 = torch.cat([t_full, t_full])
            vals = torch.cat([torch.zeros(b), cond_tensor])
            mask = torch.cat([torch.zeros(b, dtype=torch.bool), cond_mask])
            out = params.eps_model(both, t2, vals, mask)
            eps_u, eps_c = out[:b], out[b:]
            eps_hat = eps_u + omegas * (eps_c - eps_u)
            # Bound the implied clean trajectory to the standardized data
            # envelope and rebuild the noise estimate from the bounded value.
            # Late steps divide by a vanishing sqrt(alpha_bar), so an
            # unbounded estimate would amplify prediction error ~30x per step
            # and let the chain run away from the data manifold.
            x0_hat = (x - sqrt_1m_ab[t - 1] * eps_hat) / sqrt_ab[t - 1]
            x0_hat.clamp_(-params.state_clip, params.state_clip)
            eps_hat = (x - sqrt_ab[t - 1] * x0_hat) / sqrt_1m_ab[t - 1]
            if t > 1:
                noise = torch.from_numpy(
                    np.stack([rng.standard_normal((dz, n_cols)) for rng in rngs]).astype(np.float32)
                )
            else:
                noise = None
            x = denoise_step(x, t, eps_hat, params.schedule, noise)
            # Late-schedule steps divide by sqrt(alpha_t) with beta_t near its
            # clip, which amplifies prediction error ~30x; bounding the state
            # to the standardized data envelope keeps the chain from running
            # away while leaving in-distribution values untouched.
            x = x.clamp_(-params.state_clip, params.state_clip)
            x[:, :, 0] = zs_t
            x[:, :, -1] = zg_t
            if not torch.isfinite(x).all():
                raise SamplerDivergedError(f"non-finite trajectory at step {t}", step=t)
            if trace is not None:
                trace.append(x.clone().numpy())

    raw = params.denormalize_latent(x.permute(0, 2, 1).numpy())
    for i, req in enumerate(requests):
        raw[i, 0] = req.z_start.astype(np.float32)
        raw[i, -1] = req.z_goal.astype(np.float32)
    return raw


def inpaint_sample(
    request: PlanRequest, params: DiffuserParams, trace: list | None = None
) -> np.ndarray:
    """(N+1, d_z) raw latent trajectory with bit-exact endpoints."""
    return inpaint_sample_batch([request], params, trace)[0]


# --------------------------------------------------------- return heuristic


def estimate_return(
    fp_start: FeaturePose, fp_goal: FeaturePose, v: float, discount: float, N: int
) -> float:
    """Constant-velocity return heuristic: slide the relative target vector
    linearly from its start to its goal value over N steps and sum the
    discounted negative distances. Raw (unnormalized) return."""
    if v <= 0:
        raise ValueError("velocity must be positive")
    if N < 1:
        raise ValueError("need at least one step")
    r0 = feature_to_cartesian(fp_start.r, fp_start.theta, fp_start.phi)
    rN = feature_to_cartesian(fp_goal.r, fp_goal.theta, fp_goal.phi)
    d = r0 - rN
    dist = float(np.linalg.norm(d))
    ks = np.arange(N + 1)
    if dist == 0.0:
        return float(-np.linalg.norm(rN) * np.sum(discount**ks))
    d_hat = d / dist
    travel_time = dist / v
    dt = travel_time / N
    remaining = dist - v * ks * dt
    points = remaining[:, None] * d_hat[None, :] + rN[None, :]
    return float(-np.sum(discount**ks * np.linalg.norm(points, axis=1)))


# ------------------------------------------------------------ velocity model


@dataclass
class VelocityModel:
    mode: str                   # "average" | "regression" (as fitted)
    v_avg: float
    coeffs: tuple[float, float, float]  # v = a*d_lin + b*d_yaw + c
    v_min: float
    v_max: float
    requested_mode: str = ""
    fell_back: bool = False

    def predict(self, d_lin: float, d_yaw: float) -> float:
        if self.mode == "regression":
            a, b, c = self.coeffs
            v = a * d_lin + b * d_yaw + c
        else:
            v = self.v_avg
        return float(min(max(v, self.v_min), self.v_max))


def fit_velocity_model(
    dataset,
    mode: str,
    cmvae=None,
    dt: float = 0.1,
    v_min: float = 0.05,
    v_max: float = 1.0,
) -> VelocityModel:
    """AVERAGE: mean path-length/time speed over episodes. REGRESSION:
    least-squares plane speed ~ a*d_lin + b*d_yaw + c, with the endpoint
    distances taken from CM-VAE feature decodings when a model is given and
    from the recorded feature poses otherwise."""
    if mode not in ("average", "regression"):
        raise ValueError(f"unknown velocity mode {mode!r}")
    speeds, d_lins, d_yaws = [], [], []
    for rec in dataset.records:
        steps = rec.poses[1:, :2] - rec.poses[:-1, :2]
        path = float(np.linalg.norm(steps, axis=1).sum())
        speeds.append(path / (len(rec) * dt))
        if cmvae is not None:
            fps = cmvae.decode_feature_np(
                cmvae.encode_mean_np(rec.images[[0, -1]])[:, :4]
            )
        else:
            fps = rec.feature_poses[[0, -1]]
        carts = features_to_cartesian(fps)
        d_lins.append(float(np.linalg.norm(carts[0] - carts[1])))
        d_yaws.append(abs(wrap_angle(fps[0][3] - fps[1][3])))
    speeds = np.asarray(speeds)
    v_avg = float(speeds.mean())

    fitted_mode, coeffs, fell_back = "average", (0.0, 0.0, v_avg), False
    if mode == "regression":
        design = np.stack([d_lins, d_yaws, np.ones(len(speeds))], axis=1)
        solution, _, rank, _ = np.linalg.lstsq(design, speeds, rcond=None)
        if rank < 3:
            warnings.warn("velocity regression is rank-deficient; falling back to average speed")
            fell_back = True
        else:
            fitted_mode, coeffs = "regression", tuple(float(c) for c in solution)
    return VelocityModel(
        mode=fitted_mode,
        v_avg=v_avg,
        coeffs=coeffs,
        v_min=v_min,
        v_max=v_max,
        requested_mode=mode,
        fell_back=fell_back,
    )


def save_velocity_model(model: VelocityModel, path) -> None:
    with open(path, "w") as fh:
        json.dump(
            {
                "mode": model.mode,
                "v_avg": model.v_avg,
                "coeffs": list(model.coeffs),
                "v_min": model.v_min,
                "v_max": model.v_max,
                "requested_mode": model.requested_mode,
                "fell_back": model.fell_back,
            },
            fh,
            indent=2,
        )


def load_velocity_model(path) -> VelocityModel:
    with open(path) as fh:
        blob = json.load(fh)
    return VelocityModel(
        mode=blob["mode"],
        v_avg=blob["v_avg"],
        coeffs=tuple(blob["coeffs"]),
        v_min=blob["v_min"],
        v_max=blob["v_max"],
        requested_mode=blob.get("requested_mode", blob["mode"]),
        fell_back=blob.get("fell_back", False),
    )


# --------------------------------------------------------------------- plan


def plan_condition(
    z_start: np.ndarray,
    z_goal: np.ndarray,
    cmvae,
    params: DiffuserParams,
    velocity_model: VelocityModel,
    discount: float,
) -> dict:
    """Decode both endpoint latents, pick a velocity, and run the return
    heuristic; returns the conditioning diagnostics shared by every plan."""
    fp_start = FeaturePose(*cmvae.decode_feature_np(z_start[:4]))
    fp_goal = FeaturePose(*cmvae.decode_feature_np(z_goal[:4]))
    carts = features_to_cartesian(np.stack([fp_start.as_array(), fp_goal.as_array()]))
    d_lin = float(np.linalg.norm(carts[0] - carts[1]))
    d_yaw = abs(wrap_angle(fp_start.gamma - fp_goal.gamma))
    v = velocity_model.predict(d_lin, d_yaw)
    raw_est = estimate_return(fp_start, fp_goal, v, discount, params.horizon)
    norm_est = params.normalize_return(raw_est)
    return {
        "fp_start": fp_start,
        "fp_goal": fp_goal,
        "goal_cart": carts[1],
        "velocity": v,
        "d_lin": d_lin,
        "d_yaw": d_yaw,
        "raw_return_estimate": raw_est,
        "norm_return_estimate": norm_est,
        "return_out_of_range": not -1.0 <= norm_est <= 1.0,
        "return_clamped": float(min(1.0, max(-1.0, norm_est))),
    }


def plan(
    current_image: np.ndarray,
    target_image: np.ndarray,
    cmvae,
    params: DiffuserParams,
    velocity_model: VelocityModel,
    config: ExperimentConfig,
    seed: int | None = None,
    return_override: float | None = None,
    omega: float | None = None,
    target_latent: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray, dict]:
    """Full image-to-actions pipeline for one plan.

    The goal image is static across replans, so callers may pass its encoder
    mean as `target_latent` to skip re-encoding it.

    Returns (latent trajectory (N+1, d_z), actions (N, 3), diagnostics)."""
    seed = config.run.seed if seed is None else seed
    z_start = cmvae.encode_mean_np(current_image)
    z_goal = target_latent if target_latent is not None else cmvae.encode_mean_np(target_image)
    condition = plan_condition(
        z_start, z_goal, cmvae, params, velocity_model, config.data.discount
    )

    return_used = condition["return_clamped"] if return_override is None else float(return_override)
    request = PlanRequest(z_start, z_goal, return_used, omega, seed)
    traj = inpaint_sample(request, params)

    znorm = params.normalize_latent(traj).astype(np.float32)
    z_t = torch.from_numpy(znorm)
    with torch.no_grad():
        actions = params.inv_model(z_t[:-1], z_t[1:]).numpy()

    col_features = cmvae.decode_feature_np(traj[:, :4])
    col_carts = features_to_cartesian(col_features)
    col_goal_dist = np.linalg.norm(col_carts - condition["goal_cart"][None, :], axis=1)
    jumps = np.linalg.norm(np.diff(col_carts, axis=0), axis=1)
    diagnostics = dict(
        condition,
        fp_start=condition["fp_start"].as_array(),
        fp_goal=condition["fp_goal"].as_array(),
        return_used=return_used,
        col_target_dist=col_features[:, 0].copy(),
        col_goal_dist=col_goal_dist,
        max_jump=float(jumps.max()),
        terminal_goal_dist=float(col_goal_dist[-2]),
        seed=seed,
    )
    return traj, actions, diagnostics
