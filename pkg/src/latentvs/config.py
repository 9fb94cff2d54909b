"""Experiment configuration: typed blocks, INI-style files, fingerprints.

The config file is plain text with one section per block::

    [world]
    room_size = 5.0
    ...

Every field has a default, so an empty file (or no file) is a valid,
fully-runnable experiment. Unknown sections or keys are rejected.
"""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import io
import json
import math
from dataclasses import dataclass, field, fields
from pathlib import Path

from .errors import ConfigError


@dataclass
class WorldConfig:
    room_size: float = 5.0
    image_size: int = 32
    fov: float = 1.21
    wall_height: float = 2.0
    camera_height: float = 1.0
    target_wall: str = "east"          # east | west | north | south
    target_center: float = 2.5         # coordinate along the target wall
    target_width: float = 1.0          # side of the square patch
    target_height: float = 1.0         # z of the patch center
    v_max: float = 1.0
    omega_max: float = 1.0
    dt: float = 0.1


@dataclass
class DataConfig:
    episodes: int = 2000
    max_steps: int = 100
    min_steps: int = 36                # hover-padded so every episode yields windows
    arrival_dist: float = 0.3          # xy distance to the goal viewing pose
    arrival_align: float = 0.25        # |bearing to target| at arrival, rad
    invisible_frac: float = 0.5        # fraction of spawns with target out of view
    discount: float = 0.99
    goal_standoff: float = 1.2         # goal viewing pose distance from the wall
    min_spawn_dist: float = 1.0        # keep spawns away from the goal pose
    spawn_margin: float = 0.3          # keep spawns off the walls
    align_radius: float = 0.9          # within this of the goal, face the target
    hover_steps: int = 8               # settled steps appended after arrival
    expert_kp_speed: float = 0.8
    expert_kp_yaw: float = 2.5
    expert_speed_cap: float = 0.9
    noise_linear: float = 0.04         # action noise sigma, m/s
    noise_yaw: float = 0.06            # action noise sigma, rad/s
    hover_noise: float = 0.01          # action noise while settled at the goal
    val_fraction: float = 0.08         # trailing episodes held out from training


@dataclass
class CmvaeConfig:
    latent_dim: int = 10
    epochs: int = 26
    batch_size: int = 128
    lr: float = 1e-3
    w_image: float = 1.0
    w_feature: float = 6.0
    w_kl: float = 0.02
    kl_warmup_frac: float = 0.3        # ramp w_kl over this fraction of steps; 0 disables


@dataclass
class DdpmConfig:
    diffusion_steps: int = 100         # reverse-chain length
    horizon: int = 31                  # trajectory has horizon+1 columns
    guidance: float = 1.2              # classifier-free guidance weight
    dropout_prob: float = 0.25         # conditioning dropout probability
    train_steps: int = 18000
    batch_size: int = 64
    lr: float = 3e-4
    hidden: int = 64
    emb_dim: int = 64
    window_stride: int = 1
    sample_latents: bool = False       # encode with sampled z instead of the mean


@dataclass
class PlannerConfig:
    velocity_mode: str = "regression"  # regression | average
    v_min: float = 0.05
    v_max: float = 1.0
    smooth_jump_max: float = 4.0       # admissible max per-step decoded jump, m
    converge_dist_max: float = 0.6     # admissible last-free-column distance, m


@dataclass
class ControllerConfig:
    n_exec: int = 5
    max_replans: int = 20
    arrive_dist: float = 0.5           # decoded distance to the goal's feature pose
    arrive_yaw: float = 0.4            # |decoded yaw - goal yaw|


@dataclass
class RunConfig:
    seed: int = 0
    out_dir: str = "runs/default"
    eval_episodes: int = 50
    open_loop_samples: int = 100
    level_plans: int = 20              # plans per return level in the conditioning study
    fixture_start_x: float = 1.8
    fixture_start_y: float = 1.2
    fixture_start_psi: float = 2.356194490192345  # 3*pi/4: target behind the camera


@dataclass
class ExperimentConfig:
    world: WorldConfig = field(default_factory=WorldConfig)
    data: DataConfig = field(default_factory=DataConfig)
    cmvae: CmvaeConfig = field(default_factory=CmvaeConfig)
    ddpm: DdpmConfig = field(default_factory=DdpmConfig)
    planner: PlannerConfig = field(default_factory=PlannerConfig)
    controller: ControllerConfig = field(default_factory=ControllerConfig)
    run: RunConfig = field(default_factory=RunConfig)

    _BLOCKS = ("world", "data", "cmvae", "ddpm", "planner", "controller", "run")

    def validate(self) -> None:
        w, d, c, m, p, k = self.world, self.data, self.cmvae, self.ddpm, self.planner, self.controller
        checks = [
            (w.room_size > 0, "world.room_size must be positive"),
            (w.image_size >= 8, "world.image_size must be at least 8"),
            (0 < w.fov < math.pi, "world.fov must be in (0, pi)"),
            (w.target_wall in ("east", "west", "north", "south"),
             "world.target_wall must be one of east/west/north/south"),
            (0 < w.target_width <= w.room_size, "world.target_width out of range"),
            (w.dt > 0, "world.dt must be positive"),
            (d.episodes >= 1, "data.episodes must be at least 1"),
            (0 < d.discount <= 1, "data.discount must be in (0, 1]"),
            (0 <= d.invisible_frac <= 1, "data.invisible_frac must be in [0, 1]"),
            (d.min_steps >= m.horizon + 1,
             "data.min_steps must cover a full ddpm window (horizon + 1 frames)"),
            (c.latent_dim > 4, "cmvae.latent_dim must exceed the 4 feature slots"),
            (m.diffusion_steps >= 1, "ddpm.diffusion_steps must be at least 1"),
            (m.horizon >= 1, "ddpm.horizon must be at least 1"),
            (0 <= m.dropout_prob < 1, "ddpm.dropout_prob must be in [0, 1)"),
            (m.guidance >= 0, "ddpm.guidance must be nonnegative"),
            (p.velocity_mode in ("regression", "average"),
             "planner.velocity_mode must be regression or average"),
            (0 < p.v_min < p.v_max, "planner velocity clamp must satisfy 0 < v_min < v_max"),
            (1 <= k.n_exec <= m.horizon, "controller.n_exec must be in 1..ddpm.horizon"),
            (k.max_replans >= 1, "controller.max_replans must be at least 1"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)

    # ---------------------------------------------------------------- io

    @classmethod
    def from_file(cls, path: str | Path) -> "ExperimentConfig":
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        parser = configparser.ConfigParser()
        try:
            parser.read_string(path.read_text())
        except configparser.Error as exc:
            raise ConfigError(f"cannot parse {path}: {exc}") from exc
        return cls._from_parser(parser, str(path))

    @classmethod
    def from_text(cls, text: str) -> "ExperimentConfig":
        parser = configparser.ConfigParser()
        try:
            parser.read_string(text)
        except configparser.Error as exc:
            raise ConfigError(f"cannot parse config text: {exc}") from exc
        return cls._from_parser(parser, "<text>")

    @classmethod
    def _from_parser(cls, parser: configparser.ConfigParser, origin: str) -> "ExperimentConfig":
        cfg = cls()
        for section in parser.sections():
            if section not in cls._BLOCKS:
                raise ConfigError(
                    f"{origin}: unknown section [{section}]; expected one of {', '.join(cls._BLOCKS)}"
                )
            block = getattr(cfg, section)
            block_fields = {f.name: f for f in fields(block)}
            for key, raw in parser.items(section):
                if key not in block_fields:
                    raise ConfigError(f"{origin}: unknown key '{key}' in section [{section}]")
                setattr(block, key, _convert(raw, block_fields[key].type, section, key))
        cfg.validate()
        return cfg

    def to_file(self, path: str | Path) -> None:
        Path(path).write_text(self.to_text())

    def to_text(self) -> str:
        parser = configparser.ConfigParser()
        for name in self._BLOCKS:
            block = getattr(self, name)
            parser[name] = {f.name: repr(getattr(block, f.name)) for f in fields(block)}
        buf = io.StringIO()
        parser.write(buf)
        return buf.getvalue()

    # ------------------------------------------------------- fingerprints

    def block_dict(self, name: str) -> dict:
        return dataclasses.asdict(getattr(self, name))

    def fingerprint(self, *blocks: str) -> str:
        """Stable hash over the named blocks (all blocks when none given).
        run.out_dir is excluded: artifacts stay valid when relocated."""
        names = blocks or self._BLOCKS
        payload = {n: self.block_dict(n) for n in names}
        payload.get("run", {}).pop("out_dir", None)
        canon = json.dumps(payload, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()


_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _convert(raw: str, ftype, section: str, key: str):
    raw = raw.strip()
    if ftype in (bool, "bool"):
        low = raw.lower()
        if low in _TRUE:
            return True
        if low in _FALSE:
            return False
        raise ConfigError(f"[{section}] {key}: expected a boolean, got {raw!r}")
    if ftype in (int, "int"):
        try:
            return int(raw)
        except ValueError as exc:
            raise ConfigError(f"[{section}] {key}: expected an integer, got {raw!r}") from exc
    if ftype in (float, "float"):
        try:
            return float(raw)
        except ValueError as exc:
            raise ConfigError(f"[{section}] {key}: expected a number, got {raw!r}") from exc
    if raw.startswith(("'", '"')) and raw.endswith(("'", '"')) and len(raw) >= 2:
        return raw[1:-1]
    return raw
