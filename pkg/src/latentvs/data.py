"""Expert trajectory dataset: generation, return normalization, binary container.

Episodes are driven by a scripted holonomic controller with Gaussian action
noise: translate proportionally toward a fixed goal viewing pose, face the
direction of travel while far, face the target while near, then hover briefly
after arrival so every episode is long enough to slice fixed-horizon windows
and contributes near-stationary frame pairs.

The on-disk container is versioned and checksummed::

    magic "LVSD" | version u32 | header_len u64 | JSON header | payload | sha256

Scalar metadata lives in the JSON header; the payload is the concatenation of
each record's arrays (images uint8, then feature poses, actions, rewards,
poses as float64) in record order.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .config import DataConfig, ExperimentConfig
from .errors import (
    DatasetChecksumError,
    DatasetFormatError,
    DatasetTruncatedError,
    DatasetVersionError,
    DegenerateDatasetError,
)
from .world import Action, RobotPose, World, wrap_angle

_MAGIC = b"LVSD"
_VERSION = 1


@dataclass
class TrajectoryRecord:
    images: np.ndarray         # (L+1, H, W, 3) uint8
    feature_poses: np.ndarray  # (L+1, 4) float64: r, theta, phi, gamma
    actions: np.ndarray        # (L, 3) float64: v_fwd, v_lat, omega
    rewards: np.ndarray        # (L+1,) float64
    poses: np.ndarray          # (L+1, 3) float64: x, y, psi (evaluation only)
    raw_return: float
    seed: int
    norm_return: float = math.nan

    def __len__(self) -> int:
        return int(self.actions.shape[0])

    def images_float(self) -> np.ndarray:
        return self.images.astype(np.float32) / 255.0


@dataclass
class Dataset:
    records: list[TrajectoryRecord]
    discount: float
    return_min: float = math.nan
    return_max: float = math.nan

    @property
    def normalized(self) -> bool:
        return not math.isnan(self.return_min)

    def normalize_value(self, raw: float) -> float:
        """Map a raw return through the stored affine normalization."""
        span = self.return_max - self.return_min
        return 2.0 * (raw - self.return_min) / span - 1.0

    def denormalize_value(self, norm: float) -> float:
        span = self.return_max - self.return_min
        return self.return_min + 0.5 * (norm + 1.0) * span

    def window_index(self, horizon: int, stride: int = 1) -> np.ndarray:
        """(n_windows, 2) array of (record index, start frame) covering all
        length-(horizon+1) frame windows at the given stride."""
        pairs = [
            (i, s)
            for i, rec in enumerate(self.records)
            for s in range(0, len(rec) - horizon + 1, stride)
        ]
        return np.asarray(pairs, dtype=np.int64).reshape(-1, 2)

    def window_return(self, rec_idx: int, start: int, horizon: int) -> float:
        """Normalized, clamped discounted return of one frame window."""
        rec = self.records[rec_idx]
        raw = discounted_return(rec.rewards[start : start + horizon + 1], self.discount)
        return float(min(1.0, max(-1.0, self.normalize_value(raw))))

    def split(self, val_fraction: float) -> tuple["Dataset", "Dataset"]:
        """Hold out the trailing fraction of episodes; both halves keep the
        dataset-wide normalization constants."""
        n_val = min(max(1, round(len(self.records) * val_fraction)), len(self.records) - 1)
        train = Dataset(self.records[:-n_val], self.discount, self.return_min, self.return_max)
        val = Dataset(self.records[-n_val:], self.discount, self.return_min, self.return_max)
        return train, val

    def frame_arrays(self) -> tuple[np.ndarray, np.ndarray]:
        """All frames flattened: (images uint8 (n,H,W,3), feature poses (n,4))."""
        images = np.concatenate([rec.images for rec in self.records])
        features = np.concatenate([rec.feature_poses for rec in self.records])
        return images, features


def discounted_return(rewards, discount: float) -> float:
    """Sum of discount**k * rewards[k]."""
    rewards = np.asarray(rewards, dtype=np.float64)
    return float(np.dot(discount ** np.arange(rewards.shape[0]), rewards))


def normalize_returns(dataset: Dataset) -> Dataset:
    """Affinely map raw episode returns onto [-1, 1] in place."""
    raws = np.array([rec.raw_return for rec in dataset.records])
    lo, hi = float(raws.min()), float(raws.max())
    if hi - lo <= 0.0:
        raise DegenerateDatasetError(
            f"all {len(dataset.records)} episode returns equal {lo}; cannot normalize"
        )
    dataset.return_min, dataset.return_max = lo, hi
    for rec in dataset.records:
        rec.norm_return = dataset.normalize_value(rec.raw_return)
    return dataset


# ------------------------------------------------------------------ rollout


def sample_spawn(
    world: World,
    data: DataConfig,
    rng: np.random.Generator,
    want_invisible: bool,
    goal: RobotPose,
) -> RobotPose:
    """Rejection-sample a spawn pose with the requested target visibility."""
    lo = data.spawn_margin
    hi = world.config.room_size - data.spawn_margin
    for _ in range(10_000):
        pose = RobotPose(
            float(rng.uniform(lo, hi)),
            float(rng.uniform(lo, hi)),
            wrap_angle(rng.uniform(-math.pi, math.pi)),
        )
        if math.hypot(pose.x - goal.x, pose.y - goal.y) < data.min_spawn_dist:
            continue
        if world.target_visible(pose) != want_invisible:
            return pose
    raise RuntimeError("spawn sampling failed to satisfy the visibility constraint")


def _expert_action(pose: RobotPose, goal: RobotPose, data: DataConfig, rng) -> Action:
    dxw, dyw = goal.x - pose.x, goal.y - pose.y
    dist = math.hypot(dxw, dyw)
    cos_psi, sin_psi = math.cos(pose.psi), math.sin(pose.psi)
    fwd_err = dxw * cos_psi + dyw * sin_psi
    lat_err = -dxw * sin_psi + dyw * cos_psi
    speed = min(data.expert_speed_cap, data.expert_kp_speed * dist)
    v_fwd = speed * fwd_err / dist if dist > 1e-9 else 0.0
    v_lat = speed * lat_err / dist if dist > 1e-9 else 0.0
    if dist > data.align_radius:
        heading_err = wrap_angle(math.atan2(dyw, dxw) - pose.psi)
    else:
        heading_err = wrap_angle(goal.psi - pose.psi)
    return Action(
        v_fwd + rng.normal(0.0, data.noise_linear),
        v_lat + rng.normal(0.0, data.noise_linear),
        data.expert_kp_yaw * heading_err + rng.normal(0.0, data.noise_yaw),
    )


def expert_rollout(seed: int, config: ExperimentConfig, world: World | None = None) -> TrajectoryRecord:
    """One scripted episode, fully determined by its integer seed."""
    world = world or World(config.world)
    data = config.data
    rng = np.random.default_rng(seed)
    goal = world.goal_pose(data.goal_standoff)
    want_invisible = bool(rng.random() < data.invisible_frac)
    pose = sample_spawn(world, data, rng, want_invisible, goal)

    images, poses, features, rewards, actions = [], [], [], [], []
    hover_left = -1  # -1 until arrival, then a countdown of settled steps
    while True:
        images.append(np.round(world.render(pose) * 255.0).astype(np.uint8))
        poses.append((pose.x, pose.y, pose.psi))
        features.append(world.feature_pose(pose).as_array())
        rewards.append(world.reward(pose))

        dist = math.hypot(pose.x - goal.x, pose.y - goal.y)
        align = abs(wrap_angle(pose.psi - goal.psi))
        if hover_left < 0 and dist < data.arrival_dist and align < data.arrival_align:
            hover_left = data.hover_steps
        steps_taken = len(images) - 1
        if steps_taken >= data.max_steps or (hover_left == 0 and steps_taken >= data.min_steps):
            break

        if hover_left >= 0:
            act = Action(*rng.normal(0.0, data.hover_noise, size=3))
            hover_left = max(hover_left - 1, 0)
        else:
            act = _expert_action(pose, goal, data, rng)
        act, _ = world.clamp_action(act)
        actions.append(act.as_array())
        pose = world.step(pose, act)

    rewards = np.asarray(rewards, dtype=np.float64)
    return TrajectoryRecord(
        images=np.stack(images),
        feature_poses=np.stack(features),
        actions=np.asarray(actions, dtype=np.float64).reshape(len(actions), 3),
        rewards=rewards,
        poses=np.asarray(poses, dtype=np.float64),
        raw_return=discounted_return(rewards, data.discount),
        seed=int(seed),
    )


def generate_dataset(config: ExperimentConfig, seed: int | None = None) -> Dataset:
    """Generate, label, and normalize the full expert corpus."""
    seed = config.run.seed if seed is None else seed
    world = World(config.world)
    episode_seeds = np.random.SeedSequence(seed).generate_state(config.data.episodes, np.uint64)
    records = [expert_rollout(int(s), config, world) for s in episode_seeds]
    return normalize_returns(Dataset(records, discount=config.data.discount))


# ---------------------------------------------------------------- container


def _record_payload_arrays(rec: TrajectoryRecord):
    return (
        np.ascontiguousarray(rec.images),
        np.ascontiguousarray(rec.feature_poses, dtype=np.float64),
        np.ascontiguousarray(rec.actions, dtype=np.float64),
        np.ascontiguousarray(rec.rewards, dtype=np.float64),
        np.ascontiguousarray(rec.poses, dtype=np.float64),
    )


def write_dataset(dataset: Dataset, path) -> None:
    if not dataset.records:
        raise DatasetFormatError("refusing to write an empty dataset")
    h, w = dataset.records[0].images.shape[1:3]
    header = {
        "episodes": len(dataset.records),
        "image_hw": [int(h), int(w)],
        "discount": dataset.discount,
        "return_min": dataset.return_min,
        "return_max": dataset.return_max,
        "records": [
            {
                "length": len(rec),
                "seed": rec.seed,
                "raw_return": rec.raw_return,
                "norm_return": rec.norm_return,
            }
            for rec in dataset.records
        ],
    }
    header_bytes = json.dumps(header).encode()
    digest = hashlib.sha256()
    with open(path, "wb") as fh:
        for chunk in (
            _MAGIC,
            _VERSION.to_bytes(4, "little"),
            len(header_bytes).to_bytes(8, "little"),
            header_bytes,
        ):
            digest.update(chunk)
            fh.write(chunk)
        for rec in dataset.records:
            for arr in _record_payload_arrays(rec):
                chunk = arr.tobytes()
                digest.update(chunk)
                fh.write(chunk)
        fh.write(digest.digest())


def read_dataset(path) -> Dataset:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 16:
        raise DatasetTruncatedError(f"{path}: file shorter than the fixed header")
    if blob[:4] != _MAGIC:
        raise DatasetFormatError(f"{path}: bad magic {blob[:4]!r}; not a dataset file")
    version = int.from_bytes(blob[4:8], "little")
    if version != _VERSION:
        raise DatasetVersionError(f"{path}: unsupported container version {version}")
    header_len = int.from_bytes(blob[8:16], "little")
    if len(blob) < 16 + header_len:
        raise DatasetTruncatedError(f"{path}: truncated inside the header")
    try:
        header = json.loads(blob[16 : 16 + header_len])
    except json.JSONDecodeError as exc:
        raise DatasetFormatError(f"{path}: unreadable header: {exc}") from exc

    h, w = header["image_hw"]
    offset = 16 + header_len
    payload_size = sum(
        (rec["length"] + 1) * (h * w * 3) + ((rec["length"] + 1) * 4 + rec["length"] * 3
        + (rec["length"] + 1) + (rec["length"] + 1) * 3) * 8
        for rec in header["records"]
    )
    total = offset + payload_size
    if len(blob) < total + 32:
        raise DatasetTruncatedError(
            f"{path}: payload truncated ({len(blob)} bytes, expected {total + 32})"
        )
    if len(blob) != total + 32:
        raise DatasetFormatError(f"{path}: {len(blob) - total - 32} trailing bytes")
    stored = blob[total : total + 32]
    if hashlib.sha256(blob[:total]).digest() != stored:
        raise DatasetChecksumError(f"{path}: payload checksum mismatch")

    records = []
    pos = offset
    for meta in header["records"]:
        length = meta["length"]
        shapes = [
            ((length + 1, h, w, 3), np.uint8),
            ((length + 1, 4), np.float64),
            ((length, 3), np.float64),
            ((length + 1,), np.float64),
            ((length + 1, 3), np.float64),
        ]
        arrays = []
        for shape, dtype in shapes:
            nbytes = int(np.prod(shape)) * np.dtype(dtype).itemsize
            arrays.append(np.frombuffer(blob, dtype, int(np.prod(shape)), pos).reshape(shape).copy())
            pos += nbytes
        records.append(
            TrajectoryRecord(
                images=arrays[0],
                feature_poses=arrays[1],
                actions=arrays[2],
                rewards=arrays[3],
                poses=arrays[4],
                raw_return=meta["raw_return"],
                seed=meta["seed"],
                norm_return=meta["norm_return"],
            )
        )
    return Dataset(
        records,
        discount=header["discount"],
        return_min=header["return_min"],
        return_max=header["return_max"],
    )
