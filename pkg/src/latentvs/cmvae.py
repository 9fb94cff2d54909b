"""Cross-modal VAE: images embed into a d_z latent whose first four
coordinates decode to the target's relative pose.

The image decoder consumes the full latent; the feature decoder consumes
exactly z[..., :4]. Angles are regressed as (sin, cos) pairs and reassembled
with atan2, so the raw feature head emits 7 numbers per sample:
(r, sin/cos theta, sin/cos phi, sin/cos gamma). Elevation phi is reassembled
against |cos phi|, which pins it inside (-pi/2, pi/2).
"""

from __future__ import annotations

import math
from dataclasses import asdict

import numpy as np
import torch
from torch import nn

from .config import CmvaeConfig, ExperimentConfig
from .errors import CheckpointError, TrainingDivergedError

_CKPT_VERSION = 1


def feature_targets(features: np.ndarray) -> np.ndarray:
    """(n, 4) feature poses -> (n, 7) regression targets."""
    r, theta, phi, gamma = (features[:, i] for i in range(4))
    return np.stack(
        [r, np.sin(theta), np.cos(theta), np.sin(phi), np.cos(phi), np.sin(gamma), np.cos(gamma)],
        axis=1,
    )


def features_from_raw(raw: torch.Tensor) -> torch.Tensor:
    """Raw 7-channel head output -> (r, theta, phi, gamma), range-correct."""
    r = nn.functional.softplus(raw[..., 0])
    theta = torch.atan2(raw[..., 1], raw[..., 2])
    phi = torch.atan2(raw[..., 3], raw[..., 4].abs())
    gamma = torch.atan2(raw[..., 5], raw[..., 6])
    return torch.stack([r, theta, phi, gamma], dim=-1)


def kl_standard_normal(mean: torch.Tensor, log_var: torch.Tensor) -> torch.Tensor:
    """Closed-form KL(N(mean, exp(log_var)) || N(0, I)), summed over dims."""
    return 0.5 * (mean.pow(2) + log_var.exp() - log_var - 1.0).sum(dim=-1)


class Cmvae(nn.Module):
    def __init__(self, image_size: int = 32, latent_dim: int = 10):
        super().__init__()
        if image_size % 8 != 0:
            raise ValueError("image_size must be divisible by 8")
        self.image_size = image_size
        self.latent_dim = latent_dim
        base = image_size // 8
        self._base = base
        self.encoder = nn.Sequential(
            nn.Conv2d(3, 16, 4, stride=2, padding=1), nn.ReLU(),
            nn.Conv2d(16, 32, 4, stride=2, padding=1), nn.ReLU(),
            nn.Conv2d(32, 64, 4, stride=2, padding=1), nn.ReLU(),
            nn.Flatten(),
            nn.Linear(64 * base * base, 128), nn.ReLU(),
        )
        self.enc_head = nn.Linear(128, 2 * latent_dim)
        self.dec_fc = nn.Sequential(
            nn.Linear(latent_dim, 128), nn.ReLU(),
            nn.Linear(128, 64 * base * base), nn.ReLU(),
        )
        self.dec_conv = nn.Sequential(
            nn.ConvTranspose2d(64, 32, 4, stride=2, padding=1), nn.ReLU(),
            nn.ConvTranspose2d(32, 16, 4, stride=2, padding=1), nn.ReLU(),
            nn.ConvTranspose2d(16, 3, 4, stride=2, padding=1), nn.Sigmoid(),
        )
        self.feature_decoder = nn.Sequential(
            nn.Linear(4, 64), nn.ReLU(),
            nn.Linear(64, 64), nn.ReLU(),
            nn.Linear(64, 7),
        )

    # --------------------------------------------------------------- torch

    def encode(self, images: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """(n, H, W, 3) in [0,1] -> (mean, log_var), each (n, d_z)."""
        if images.shape[-3] != self.image_size or images.shape[-1] != 3:
            raise ValueError(f"expected (n, {self.image_size}, {self.image_size}, 3) images")
        out = self.enc_head(self.encoder(images.permute(0, 3, 1, 2)))
        return out[:, : self.latent_dim], out[:, self.latent_dim :]

    def decode_image(self, z: torch.Tensor) -> torch.Tensor:
        """(n, d_z) -> (n, H, W, 3) in [0, 1]."""
        if z.shape[-1] != self.latent_dim:
            raise ValueError(f"expected latent dimension {self.latent_dim}")
        n = z.shape[0]
        h = self.dec_fc(z).view(n, 64, self._base, self._base)
        return self.dec_conv(h).permute(0, 2, 3, 1)

    def decode_feature_raw(self, z4: torch.Tensor) -> torch.Tensor:
        if z4.shape[-1] != 4:
            raise ValueError("feature decoder consumes exactly 4 latent dims")
        return self.feature_decoder(z4)

    def decode_feature(self, z4: torch.Tensor) -> torch.Tensor:
        """(n, 4) latent slice -> (n, 4) array of (r, theta, phi, gamma)."""
        return features_from_raw(self.decode_feature_raw(z4))

    # --------------------------------------------------------------- numpy

    def _prep_images(self, images: np.ndarray) -> torch.Tensor:
        if images.dtype == np.uint8:
            images = images.astype(np.float32) / 255.0
        arr = np.asarray(images, dtype=np.float32)
        single = arr.ndim == 3
        if single:
            arr = arr[None]
        return torch.from_numpy(arr), single

    @torch.no_grad()
    def encode_mean_np(self, images: np.ndarray, batch: int = 512) -> np.ndarray:
        """Encoder means for uint8 or float images; accepts (H,W,3) or (n,H,W,3)."""
        tensor, single = self._prep_images(images)
        means = [self.encode(tensor[i : i + batch])[0] for i in range(0, tensor.shape[0], batch)]
        out = torch.cat(means).numpy()
        return out[0] if single else out

    @torch.no_grad()
    def decode_image_np(self, z: np.ndarray) -> np.ndarray:
        arr = np.asarray(z, dtype=np.float32)
        single = arr.ndim == 1
        if single:
            arr = arr[None]
        out = self.decode_image(torch.from_numpy(arr)).numpy()
        return out[0] if single else out

    @torch.no_grad()
    def decode_feature_np(self, z4: np.ndarray) -> np.ndarray:
        arr = np.asarray(z4, dtype=np.float32)
        single = arr.ndim == 1
        if single:
            arr = arr[None]
        out = self.decode_feature(torch.from_numpy(arr[:, :4])).numpy()
        return out[0] if single else out


def sample_latent(mean: torch.Tensor, log_var: torch.Tensor, noise: torch.Tensor) -> torch.Tensor:
    """Reparametrized draw z = mean + exp(0.5 log_var) * noise."""
    return mean + torch.exp(0.5 * log_var) * noise


def cmvae_loss(
    model: Cmvae,
    images: torch.Tensor,
    feature_targets_t: torch.Tensor,
    noise: torch.Tensor,
    config: CmvaeConfig,
    kl_weight: float | None = None,
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor, torch.Tensor]:
    """Total = w_img * image MSE + w_f * feature MSE + w_kl * KL; noise is the
    injectable reparametrization draw (same shape as the latent means)."""
    mean, log_var = model.encode(images)
    z = sample_latent(mean, log_var, noise)
    image_rec = (model.decode_image(z) - images).pow(2).mean()
    feature_rec = (model.decode_feature_raw(z[:, :4]) - feature_targets_t).pow(2).mean()
    kl = kl_standard_normal(mean, log_var).mean()
    w_kl = config.w_kl if kl_weight is None else kl_weight
    total = config.w_image * image_rec + config.w_feature * feature_rec + w_kl * kl
    return total, image_rec, feature_rec, kl


def train_cmvae(dataset, config: ExperimentConfig, seed: int | None = None) -> Cmvae:
    """Minibatch-train the CM-VAE on all dataset frames; returns the model
    with a `loss_curve` attribute of per-epoch mean loss tuples."""
    seed = config.run.seed if seed is None else seed
    ccfg = config.cmvae
    torch.manual_seed(seed)
    model = Cmvae(config.world.image_size, ccfg.latent_dim)
    opt = torch.optim.Adam(model.parameters(), lr=ccfg.lr)

    images_u8, features = dataset.frame_arrays()
    targets = torch.from_numpy(feature_targets(features).astype(np.float32))
    images_t = torch.from_numpy(images_u8)
    n = images_t.shape[0]
    rng = np.random.default_rng(seed)
    steps_per_epoch = max(1, n // ccfg.batch_size)
    total_steps = ccfg.epochs * steps_per_epoch
    warmup = int(ccfg.kl_warmup_frac * total_steps)

    curve = []
    step = 0
    for epoch in range(ccfg.epochs):
        order = rng.permutation(n)
        sums = np.zeros(4)
        for b in range(steps_per_epoch):
            idx = torch.from_numpy(order[b * ccfg.batch_size : (b + 1) * ccfg.batch_size].copy())
            batch_img = images_t[idx].float() / 255.0
            noise = torch.randn(idx.shape[0], ccfg.latent_dim)
            kl_w = ccfg.w_kl * min(1.0, (step + 1) / warmup) if warmup > 0 else ccfg.w_kl
            total, img, feat, kl = cmvae_loss(model, batch_img, targets[idx], noise, ccfg, kl_w)
            if not torch.isfinite(total):
                raise TrainingDivergedError(
                    f"non-finite CM-VAE loss at step {step}", step=step
                )
            opt.zero_grad()
            total.backward()
            opt.step()
            sums += [total.item(), img.item(), feat.item(), kl.item()]
            step += 1
        curve.append(tuple(sums / steps_per_epoch))
    model.loss_curve = curve
    model.eval()
    return model


def save_cmvae(model: Cmvae, path, config: ExperimentConfig) -> None:
    torch.save(
        {
            "version": _CKPT_VERSION,
            "kind": "cmvae",
            "image_size": model.image_size,
            "latent_dim": model.latent_dim,
            "fingerprint": config.fingerprint("world", "data", "cmvae"),
            "cmvae_config": asdict(config.cmvae),
            "loss_curve": getattr(model, "loss_curve", []),
            "state": model.state_dict(),
        },
        path,
    )


def load_cmvae(path) -> Cmvae:
    try:
        blob = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as exc:
        raise CheckpointError(f"cannot read CM-VAE checkpoint {path}: {exc}") from exc
    if not isinstance(blob, dict) or blob.get("kind") != "cmvae":
        raise CheckpointError(f"{path} is not a CM-VAE checkpoint")
    if blob.get("version") != _CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {blob.get('version')}")
    model = Cmvae(blob["image_size"], blob["latent_dim"])
    try:
        model.load_state_dict(blob["state"])
    except Exception as exc:
        raise CheckpointError(f"{path}: incompatible weights: {exc}") from exc
    model.meta = {k: blob[k] for k in ("fingerprint", "cmvae_config", "loss_curve")}
    model.loss_curve = blob["loss_curve"]
    model.eval()
    return model
