"""Return-conditioned DDPM over latent trajectories, trained classifier-free
and jointly with an inverse-dynamics head.

Trajectories are (d_z, N+1) arrays: latent dimensions are convolution
channels, the N+1 time columns are the temporal axis. Diffusion and inverse
dynamics both operate on per-dimension standardized latents; the
standardization statistics ride along in the trained parameters so planners
can map encoder outputs into and out of the model's space.

Conditioning is classifier-free: a return value in [-1, 1] embeds through a
small MLP, a learned null token stands in when the condition is dropped
(training, probability pi) or absent (unconditional branch at sampling).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from .config import ExperimentConfig
from .errors import CheckpointError, TrainingDivergedError

_CKPT_VERSION = 1


# ----------------------------------------------------------------- schedule


@dataclass
class DiffusionSchedule:
    beta: np.ndarray           # (T,), index t-1 holds beta_t
    alpha: np.ndarray          # 1 - beta
    alpha_bar: np.ndarray      # cumprod(alpha)
    posterior_var: np.ndarray  # beta_t * (1 - alpha_bar_{t-1}) / (1 - alpha_bar_t)

    @property
    def T(self) -> int:
        return int(self.beta.shape[0])


def make_cosine_schedule(T: int, s: float = 0.008) -> DiffusionSchedule:
    """Squared-cosine alpha_bar profile with offset s; betas clipped, then
    alpha_bar re-derived as the cumulative product so the chain identity is
    exact by construction."""
    if T < 1:
        raise ValueError("diffusion needs at least one step")
    ts = np.arange(T + 1, dtype=np.float64) / T
    profile = np.cos((ts + s) / (1.0 + s) * math.pi / 2.0) ** 2
    profile /= profile[0]
    beta = np.clip(1.0 - profile[1:] / profile[:-1], 1e-8, 0.999)
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    alpha_bar_prev = np.concatenate([[1.0], alpha_bar[:-1]])
    posterior_var = beta * (1.0 - alpha_bar_prev) / (1.0 - alpha_bar)
    return DiffusionSchedule(beta, alpha, alpha_bar, posterior_var)


def _gather(values: np.ndarray, t: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
    out = torch.from_numpy(values).to(like.dtype)[t.long() - 1]
    return out.view(-1, *([1] * (like.ndim - 1)))


def forward_sample(tau0: torch.Tensor, t, noise: torch.Tensor, schedule: DiffusionSchedule) -> torch.Tensor:
    """Closed-form forward marginal sqrt(ab_t) x0 + sqrt(1 - ab_t) eps.

    `t` is a 1-based step: an int applied to the whole batch, or a (batch,)
    tensor of per-sample steps."""
    if isinstance(t, int):
        if not 1 <= t <= schedule.T:
            raise ValueError(f"t={t} outside 1..{schedule.T}")
        ab = float(schedule.alpha_bar[t - 1])
        return math.sqrt(ab) * tau0 + math.sqrt(1.0 - ab) * noise
    if not bool((t >= 1).all() and (t <= schedule.T).all()):
        raise ValueError("t outside 1..T")
    ab = _gather(schedule.alpha_bar, t, tau0)
    return ab.sqrt() * tau0 + (1.0 - ab).sqrt() * noise


def denoise_step(
    x_t: torch.Tensor,
    t: int,
    eps_hat: torch.Tensor,
    schedule: DiffusionSchedule,
    noise: torch.Tensor | None = None,
) -> torch.Tensor:
    """One reverse step: posterior mean from the noise estimate, plus
    sigma_t-scaled noise for t > 1 and nothing at t = 1."""
    if not 1 <= t <= schedule.T:
        raise ValueError(f"t={t} outside 1..{schedule.T}")
    a = float(schedule.alpha[t - 1])
    ab = float(schedule.alpha_bar[t - 1])
    mean = (x_t - ((1.0 - a) / math.sqrt(1.0 - ab)) * eps_hat) / math.sqrt(a)
    if t == 1:
        return mean
    if noise is None:
        raise ValueError("denoise_step needs noise for t > 1")
    return mean + math.sqrt(float(schedule.posterior_var[t - 1])) * noise


# ----------------------------------------------------------------- networks


class _ResBlock1d(nn.Module):
    def __init__(self, hidden: int, emb_dim: int):
        super().__init__()
        self.conv1 = nn.Conv1d(hidden, hidden, 5, padding=2)
        self.conv2 = nn.Conv1d(hidden, hidden, 5, padding=2)
        self.emb = nn.Linear(emb_dim, hidden)

    def forward(self, x: torch.Tensor, emb: torch.Tensor) -> torch.Tensor:
        h = nn.functional.silu(self.conv1(x) + self.emb(emb)[:, :, None])
        return nn.functional.silu(x + self.conv2(h))


class EpsilonNet(nn.Module):
    """Temporal-conv noise predictor over (batch, d_z, N+1) arrays with a
    step-index embedding and a return condition (or learned null token)."""

    def __init__(self, latent_dim: int, hidden: int = 64, emb_dim: int = 64, n_blocks: int = 4):
        super().__init__()
        self.latent_dim = latent_dim
        half = emb_dim // 2
        self.register_buffer(
            "freqs", torch.exp(-math.log(10_000.0) * torch.arange(half, dtype=torch.float32) / half)
        )
        self.null_token = nn.Parameter(torch.zeros(emb_dim))
        self.return_proj = nn.Sequential(
            nn.Linear(1, emb_dim), nn.SiLU(), nn.Linear(emb_dim, emb_dim)
        )
        self.time_mlp = nn.Sequential(
            nn.Linear(emb_dim, emb_dim), nn.SiLU(), nn.Linear(emb_dim, emb_dim)
        )
        self.conv_in = nn.Conv1d(latent_dim, hidden, 5, padding=2)
        self.blocks = nn.ModuleList(_ResBlock1d(hidden, emb_dim) for _ in range(n_blocks))
        self.conv_out = nn.Conv1d(hidden, latent_dim, 5, padding=2)
        # Gated input skip: near t = T the optimal prediction approaches
        # sqrt(1 - alpha_bar_t) * x (exact for temporally white channels), so
        # a time-conditioned gate lets the conv stack model only the residual.
        self.skip_gate = nn.Sequential(
            nn.Linear(emb_dim, emb_dim // 2), nn.SiLU(), nn.Linear(emb_dim // 2, 1)
        )

    def forward(
        self,
        x: torch.Tensor,
        t: torch.Tensor,
        cond_value: torch.Tensor,
        cond_mask: torch.Tensor,
    ) -> torch.Tensor:
        angles = t.to(self.freqs.dtype)[:, None] * self.freqs[None, :]
        temb = self.time_mlp(torch.cat([angles.cos(), angles.sin()], dim=1))
        clean = torch.where(cond_mask, cond_value, torch.zeros_like(cond_value))
        remb = self.return_proj(clean[:, None].to(temb.dtype))
        cemb = torch.where(cond_mask[:, None], remb, self.null_token.expand_as(remb))
        emb = temb + cemb
        gate = torch.sigmoid(self.skip_gate(temb))[:, :, None]
        h = self.conv_in(x)
        for block in self.blocks:
            h = block(h, emb)
        return self.conv_out(h) + gate * x


class InverseDynamics(nn.Module):
    """MLP (z_k, z_{k+1}) -> action, squashed inside the action limits."""

    def __init__(self, latent_dim: int, limits, hidden: int = 128):
        super().__init__()
        self.register_buffer("limits", torch.as_tensor(limits, dtype=torch.float32))
        self.net = nn.Sequential(
            nn.Linear(2 * latent_dim, hidden), nn.ReLU(),
            nn.Linear(hidden, hidden), nn.ReLU(),
            nn.Linear(hidden, 3), nn.Tanh(),
        )

    def forward(self, z_k: torch.Tensor, z_k1: torch.Tensor) -> torch.Tensor:
        if z_k.shape != z_k1.shape:
            raise ValueError("latent pair shapes differ")
        return self.net(torch.cat([z_k, z_k1], dim=-1)) * self.limits


# ------------------------------------------------------------------- params


@dataclass
class DiffuserParams:
    eps_model: EpsilonNet
    inv_model: InverseDynamics
    schedule: DiffusionSchedule
    horizon: int
    latent_dim: int
    guidance: float
    dropout_prob: float
    latent_mean: np.ndarray
    latent_std: np.ndarray
    return_min: float
    return_max: float
    action_limits: np.ndarray
    state_clip: float = 6.0
    loss_curve: list = field(default_factory=list)
    dropout_draws: tuple[int, int] = (0, 0)
    metrics: dict = field(default_factory=dict)

    def normalize_latent(self, z: np.ndarray) -> np.ndarray:
        return (z - self.latent_mean) / self.latent_std

    def denormalize_latent(self, z: np.ndarray) -> np.ndarray:
        return z * self.latent_std + self.latent_mean

    def normalize_return(self, raw: float) -> float:
        span = self.return_max - self.return_min
        return 2.0 * (raw - self.return_min) / span - 1.0


def guided_noise(
    x: torch.Tensor,
    return_value: float,
    t: torch.Tensor,
    params: DiffuserParams,
    omega: float | None = None,
) -> torch.Tensor:
    """Classifier-free combination eps_u + omega (eps_c - eps_u); omega
    defaults to the trained guidance weight."""
    omega = params.guidance if omega is None else omega
    b = x.shape[0]
    both = torch.cat([x, x])
    t2 = torch.cat([t, t])
    vals = torch.cat([x.new_zeros(b), x.new_full((b,), float(return_value))])
    mask = torch.cat([torch.zeros(b, dtype=torch.bool), torch.ones(b, dtype=torch.bool)])
    out = params.eps_model(both, t2, vals, mask)
    eps_u, eps_c = out[:b], out[b:]
    if omega == 0.0:
        return eps_u
    if omega == 1.0:
        return eps_c
    return eps_u + omega * (eps_c - eps_u)


def inverse_dynamics(z_k: np.ndarray, z_k1: np.ndarray, params: DiffuserParams) -> np.ndarray:
    """Predicted actions for one or more (already normalized) latent pairs."""
    a = torch.from_numpy(np.asarray(z_k, dtype=np.float32))
    b = torch.from_numpy(np.asarray(z_k1, dtype=np.float32))
    single = a.ndim == 1
    if single:
        a, b = a[None], b[None]
    with torch.no_grad():
        out = params.inv_model(a, b).numpy()
    return out[0] if single else out


# -------------------------------------------------------------------- loss


def unconditional_diffusion_loss(
    eps_model: EpsilonNet,
    tau: torch.Tensor,
    t: torch.Tensor,
    eps: torch.Tensor,
    schedule: DiffusionSchedule,
) -> torch.Tensor:
    """Plain simplified DDPM objective with every condition dropped."""
    x_t = forward_sample(tau, t, eps, schedule)
    b = tau.shape[0]
    eps_hat = eps_model(
        x_t, t, tau.new_zeros(b), torch.zeros(b, dtype=torch.bool)
    )
    return (eps_hat - eps).pow(2).mean()


def joint_training_loss(
    batch: tuple[torch.Tensor, torch.Tensor, torch.Tensor],
    params: DiffuserParams,
    schedule: DiffusionSchedule,
    randomness: dict,
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Diffusion MSE with conditioning dropout plus inverse-dynamics MSE.

    batch = (tau (b, d_z, N+1), returns (b,), actions (b, N, 3));
    randomness = {"t": (b,) long in 1..T, "eps": like tau, "delta": (b,) bool}
    with delta True meaning the condition is dropped for that sample.
    """
    tau, returns, actions = batch
    t, eps, delta = randomness["t"], randomness["eps"], randomness["delta"]
    x_t = forward_sample(tau, t, eps, schedule)
    eps_hat = params.eps_model(x_t, t, returns, ~delta)
    diffusion_term = (eps_hat - eps).pow(2).mean()

    z_k = tau[:, :, :-1].permute(0, 2, 1).reshape(-1, tau.shape[1])
    z_k1 = tau[:, :, 1:].permute(0, 2, 1).reshape(-1, tau.shape[1])
    pred = params.inv_model(z_k, z_k1)
    inverse_term = (pred - actions.reshape(-1, 3)).pow(2).mean()
    return diffusion_term + inverse_term, diffusion_term, inverse_term


# ----------------------------------------------------------------- training


def _encode_frames(dataset, cmvae, sample_latents: bool, gen: torch.Generator | None):
    """Per-record latent arrays from the CM-VAE (means unless sampling)."""
    latents = []
    for rec in dataset.records:
        if sample_latents:
            imgs = torch.from_numpy(rec.images_float())
            with torch.no_grad():
                mean, log_var = cmvae.encode(imgs)
                noise = torch.randn(mean.shape, generator=gen)
                latents.append((mean + torch.exp(0.5 * log_var) * noise).numpy())
        else:
            latents.append(cmvae.encode_mean_np(rec.images))
    return latents


def train_diffuser(dataset, cmvae, config: ExperimentConfig, seed: int | None = None) -> DiffuserParams:
    """Pre-encode windows, then jointly train the noise predictor and the
    inverse-dynamics head for config.ddpm.train_steps minibatches."""
    seed = config.run.seed if seed is None else seed
    dcfg = config.ddpm
    torch.manual_seed(seed)
    gen = torch.Generator().manual_seed(seed ^ 0x5EED)
    rng = np.random.default_rng(seed)

    train_ds, val_ds = dataset.split(config.data.val_fraction)
    per_record = _encode_frames(train_ds, cmvae, dcfg.sample_latents, gen)
    flat = np.concatenate(per_record).astype(np.float32)
    mean = flat.mean(axis=0)
    std = np.maximum(flat.std(axis=0), 1e-3)
    znorm = torch.from_numpy((flat - mean) / std)

    offsets = np.cumsum([0] + [arr.shape[0] for arr in per_record])
    act_offsets = np.cumsum([0] + [len(rec) for rec in train_ds.records])
    actions_flat = torch.from_numpy(
        np.concatenate([rec.actions for rec in train_ds.records]).astype(np.float32)
    )

    n_cols = dcfg.horizon + 1
    win_frames, win_actions, win_returns = [], [], []
    for i, rec in enumerate(train_ds.records):
        for s in range(0, len(rec) - dcfg.horizon + 1, dcfg.window_stride):
            win_frames.append(offsets[i] + s + np.arange(n_cols))
            win_actions.append(act_offsets[i] + s + np.arange(dcfg.horizon))
            win_returns.append(train_ds.window_return(i, s, dcfg.horizon))
    win_frames = torch.from_numpy(np.stack(win_frames))
    win_actions = torch.from_numpy(np.stack(win_actions))
    win_returns = torch.from_numpy(np.asarray(win_returns, dtype=np.float32))
    n_windows = win_frames.shape[0]

    limits = np.array([config.world.v_max, config.world.v_max, config.world.omega_max])
    params = DiffuserParams(
        eps_model=EpsilonNet(cmvae.latent_dim, dcfg.hidden, dcfg.emb_dim),
        inv_model=InverseDynamics(cmvae.latent_dim, limits),
        schedule=make_cosine_schedule(dcfg.diffusion_steps),
        horizon=dcfg.horizon,
        latent_dim=cmvae.latent_dim,
        guidance=dcfg.guidance,
        dropout_prob=dcfg.dropout_prob,
        latent_mean=mean,
        latent_std=std,
        return_min=dataset.return_min,
        return_max=dataset.return_max,
        action_limits=limits,
    )
    opt = torch.optim.Adam(
        list(params.eps_model.parameters()) + list(params.inv_model.parameters()), lr=dcfg.lr
    )

    dropped = total_draws = 0
    window_sums = np.zeros(3)
    since = 0
    for step in range(dcfg.train_steps):
        pick = torch.from_numpy(rng.integers(0, n_windows, dcfg.batch_size))
        tau = znorm[win_frames[pick]].permute(0, 2, 1)
        acts = actions_flat[win_actions[pick]]
        rets = win_returns[pick]
        randomness = {
            "t": torch.from_numpy(rng.integers(1, params.schedule.T + 1, dcfg.batch_size)),
            "eps": torch.randn(tau.shape, generator=gen),
            "delta": torch.from_numpy(rng.random(dcfg.batch_size) < dcfg.dropout_prob),
        }
        total, dterm, iterm = joint_training_loss((tau, rets, acts), params, params.schedule, randomness)
        if not torch.isfinite(total):
            raise TrainingDivergedError(f"non-finite DDPM loss at step {step}", step=step)
        opt.zero_grad()
        total.backward()
        opt.step()
        dropped += int(randomness["delta"].sum())
        total_draws += dcfg.batch_size
        window_sums += [total.item(), dterm.item(), iterm.item()]
        since += 1
        if (step + 1) % 50 == 0 or step + 1 == dcfg.train_steps:
            params.loss_curve.append((step + 1, *(window_sums / since)))
            window_sums[:] = 0.0
            since = 0

    params.dropout_draws = (dropped, total_draws)
    params.eps_model.eval()
    params.inv_model.eval()

    # Held-out inverse-dynamics error against the dataset's action variance.
    val_lat = _encode_frames(val_ds, cmvae, False, None)
    errs, count = 0.0, 0
    with torch.no_grad():
        for arr, rec in zip(val_lat, val_ds.records):
            zn = torch.from_numpy(params.normalize_latent(arr).astype(np.float32))
            pred = params.inv_model(zn[:-1], zn[1:])
            errs += float((pred - torch.from_numpy(rec.actions.astype(np.float32))).pow(2).sum())
            count += rec.actions.size
    all_actions = np.concatenate([rec.actions for rec in dataset.records])
    params.metrics = {
        "val_inverse_mse": errs / max(count, 1),
        "dataset_action_variance": float(all_actions.var(axis=0).mean()),
        "final_train_loss": params.loss_curve[-1][1] if params.loss_curve else math.nan,
    }
    return params


# -------------------------------------------------------------- checkpoints


def save_diffuser(params: DiffuserParams, path, config: ExperimentConfig) -> None:
    torch.save(
        {
            "version": _CKPT_VERSION,
            "kind": "ddpm",
            "fingerprint": config.fingerprint("world", "data", "cmvae", "ddpm"),
            "beta": params.schedule.beta,
            "horizon": params.horizon,
            "latent_dim": params.latent_dim,
            "guidance": params.guidance,
            "dropout_prob": params.dropout_prob,
            "hidden": params.eps_model.conv_in.out_channels,
            "emb_dim": params.eps_model.null_token.shape[0],
            "latent_mean": params.latent_mean,
            "latent_std": params.latent_std,
            "return_min": params.return_min,
            "return_max": params.return_max,
            "action_limits": params.action_limits,
            "state_clip": params.state_clip,
            "loss_curve": params.loss_curve,
            "dropout_draws": params.dropout_draws,
            "metrics": params.metrics,
            "eps_state": params.eps_model.state_dict(),
            "inv_state": params.inv_model.state_dict(),
        },
        path,
    )


def load_diffuser(path) -> DiffuserParams:
    try:
        blob = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as exc:
        raise CheckpointError(f"cannot read DDPM checkpoint {path}: {exc}") from exc
    if not isinstance(blob, dict) or blob.get("kind") != "ddpm":
        raise CheckpointError(f"{path} is not a DDPM checkpoint")
    if blob.get("version") != _CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {blob.get('version')}")
    beta = np.asarray(blob["beta"], dtype=np.float64)
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    alpha_bar_prev = np.concatenate([[1.0], alpha_bar[:-1]])
    schedule = DiffusionSchedule(
        beta, alpha, alpha_bar, beta * (1.0 - alpha_bar_prev) / (1.0 - alpha_bar)
    )
    eps_model = EpsilonNet(blob["latent_dim"], blob["hidden"], blob["emb_dim"])
    inv_model = InverseDynamics(blob["latent_dim"], blob["action_limits"])
    try:
        eps_model.load_state_dict(blob["eps_state"])
        inv_model.load_state_dict(blob["inv_state"])
    except Exception as exc:
        raise CheckpointError(f"{path}: incompatible weights: {exc}") from exc
    eps_model.eval()
    inv_model.eval()
    params = DiffuserParams(
        eps_model=eps_model,
        inv_model=inv_model,
        schedule=schedule,
        horizon=blob["horizon"],
        latent_dim=blob["latent_dim"],
        guidance=blob["guidance"],
        dropout_prob=blob["dropout_prob"],
        latent_mean=np.asarray(blob["latent_mean"], dtype=np.float32),
        latent_std=np.asarray(blob["latent_std"], dtype=np.float32),
        return_min=blob["return_min"],
        return_max=blob["return_max"],
        action_limits=np.asarray(blob["action_limits"]),
        state_clip=float(blob.get("state_clip", 6.0)),
        loss_curve=blob["loss_curve"],
        dropout_draws=tuple(blob["dropout_draws"]),
        metrics=blob["metrics"],
    )
    params.fingerprint = blob["fingerprint"]
    return params
