"""Deterministic planar world with an egocentric pinhole raycast camera.

Geometry: a square room [0, room_size]^2 with four distinctly colored walls of
uniform height, flat floor and ceiling colors, and a square target patch
painted on one wall. The robot is a point camera at fixed height whose state
is planar position plus heading. Rendering casts one ray per image column and
paints vertical bands by exact pinhole projection, so images are a
deterministic function of the pose.

Angles: headings and bearings are wrapped to (-pi, pi]; bearings are positive
to the robot's left. The camera's optical axis is the heading, horizontal
field of view is `fov`, and the image is square so the vertical FoV matches.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .config import WorldConfig
from .errors import ConfigError

TWO_PI = 2.0 * math.pi

# All palette entries are exact multiples of 1/255 so float images survive a
# uint8 round trip bit-exactly.
PALETTE = {
    "floor": np.array([60, 60, 60], np.float32) / 255.0,
    "ceiling": np.array([235, 235, 235], np.float32) / 255.0,
    "east": np.array([210, 60, 60], np.float32) / 255.0,
    "north": np.array([60, 180, 75], np.float32) / 255.0,
    "west": np.array([65, 105, 225], np.float32) / 255.0,
    "south": np.array([230, 200, 60], np.float32) / 255.0,
    "target": np.array([240, 50, 230], np.float32) / 255.0,
}

_WALL_ORDER = ("east", "north", "west", "south")
# Heading that points straight at each wall from inside the room.
_WALL_FACING = {"east": 0.0, "north": 0.5 * math.pi, "west": math.pi, "south": -0.5 * math.pi}


def wrap_angle(angle):
    """Wrap an angle (scalar or array, radians) to (-pi, pi]."""
    wrapped = np.pi - np.mod(np.pi - np.asarray(angle, dtype=np.float64), TWO_PI)
    if wrapped.ndim == 0:
        return float(wrapped)
    return wrapped


@dataclass(frozen=True)
class RobotPose:
    x: float
    y: float
    psi: float


@dataclass(frozen=True)
class Action:
    v_fwd: float
    v_lat: float
    omega: float

    def as_array(self) -> np.ndarray:
        return np.array([self.v_fwd, self.v_lat, self.omega], dtype=np.float64)


@dataclass(frozen=True)
class FeaturePose:
    r: float
    theta: float
    phi: float
    gamma: float

    def as_array(self) -> np.ndarray:
        return np.array([self.r, self.theta, self.phi, self.gamma], dtype=np.float64)


def feature_to_cartesian(r: float, theta: float, phi: float) -> np.ndarray:
    """Spherical (range, azimuth, elevation) to robot-frame (fwd, left, up)."""
    planar = r * math.cos(phi)
    return np.array([planar * math.cos(theta), planar * math.sin(theta), r * math.sin(phi)])


def cartesian_to_feature(vec: np.ndarray) -> tuple[float, float, float]:
    """Robot-frame (fwd, left, up) to spherical (range, azimuth, elevation)."""
    fwd, left, up = float(vec[0]), float(vec[1]), float(vec[2])
    r = float(np.linalg.norm(vec))
    theta = math.atan2(left, fwd)
    phi = math.atan2(up, math.hypot(fwd, left))
    return r, theta, phi


def target_pixel_mask(image: np.ndarray) -> np.ndarray:
    """Boolean H x W mask of pixels that carry the target color exactly."""
    return np.all(image == PALETTE["target"], axis=-1)


class World:
    """Raycast world bound to one configuration block."""

    def __init__(self, config: WorldConfig | None = None):
        self.config = c = config or WorldConfig()
        half = 0.5 * c.target_width
        if not (half <= c.target_center <= c.room_size - half):
            raise ConfigError("target patch must lie within its wall span")
        if c.target_height - half < 0 or c.target_height + half > c.wall_height:
            raise ConfigError("target patch must lie within the wall height")
        self.focal = (c.image_size / 2.0) / math.tan(c.fov / 2.0)
        cols = np.arange(c.image_size) + 0.5
        # Bearing of each column's ray relative to the heading (positive left).
        self.col_bearings = np.arctan((c.image_size / 2.0 - cols) / self.focal)
        self._target_wall_idx = _WALL_ORDER.index(c.target_wall)
        self._facing = _WALL_FACING[c.target_wall]
        if c.target_wall == "east":
            cx, cy = c.room_size, c.target_center
        elif c.target_wall == "west":
            cx, cy = 0.0, c.target_center
        elif c.target_wall == "north":
            cx, cy = c.target_center, c.room_size
        else:
            cx, cy = c.target_center, 0.0
        self.target_center_xyz = np.array([cx, cy, c.target_height])
        self._wall_palette = np.stack([PALETTE[name] for name in _WALL_ORDER])

    # ------------------------------------------------------------ dynamics

    def clamp_action(self, action: Action) -> tuple[Action, bool]:
        """Clamp each action component to its limit; flag when anything moved."""
        c = self.config
        v_fwd = min(max(action.v_fwd, -c.v_max), c.v_max)
        v_lat = min(max(action.v_lat, -c.v_max), c.v_max)
        omega = min(max(action.omega, -c.omega_max), c.omega_max)
        clamped = (v_fwd, v_lat, omega) != (action.v_fwd, action.v_lat, action.omega)
        return Action(v_fwd, v_lat, omega), clamped

    def step(self, pose: RobotPose, action: Action, dt: float | None = None) -> RobotPose:
        """Advance body-frame velocities for dt seconds; clamp to the room."""
        c = self.config
        dt = c.dt if dt is None else dt
        action, _ = self.clamp_action(action)
        cos_psi, sin_psi = math.cos(pose.psi), math.sin(pose.psi)
        x = pose.x + dt * (action.v_fwd * cos_psi - action.v_lat * sin_psi)
        y = pose.y + dt * (action.v_fwd * sin_psi + action.v_lat * cos_psi)
        x = min(max(x, 0.0), c.room_size)
        y = min(max(y, 0.0), c.room_size)
        return RobotPose(x, y, wrap_angle(pose.psi + dt * action.omega))

    # ----------------------------------------------------------- rendering

    def render(self, pose: RobotPose) -> np.ndarray:
        """Egocentric H x W x 3 float32 image in [0, 1]."""
        c = self.config
        size = c.image_size
        angles = pose.psi + self.col_bearings
        dirx, diry = np.cos(angles), np.sin(angles)
        with np.errstate(divide="ignore", invalid="ignore"):
            ts = np.stack([
                np.where(dirx > 1e-12, (c.room_size - pose.x) / dirx, np.inf),
                np.where(diry > 1e-12, (c.room_size - pose.y) / diry, np.inf),
                np.where(dirx < -1e-12, -pose.x / dirx, np.inf),
                np.where(diry < -1e-12, -pose.y / diry, np.inf),
            ])
        wall_idx = np.argmin(ts, axis=0)
        t = np.maximum(ts.min(axis=0), 1e-9)
        hit_x = pose.x + t * dirx
        hit_y = pose.y + t * diry
        # Perpendicular (optical-axis) depth of each column's wall hit.
        depth = t * np.cos(self.col_bearings)

        rows = (np.arange(size) + 0.5)[:, None]
        v_top = size / 2.0 + self.focal * (c.camera_height - c.wall_height) / depth
        v_bot = size / 2.0 + self.focal * c.camera_height / depth
        wall_band = (rows >= v_top) & (rows < v_bot)

        half = 0.5 * c.target_width
        along = np.where(np.asarray(wall_idx) % 2 == 0, hit_y, hit_x)
        on_target_col = (wall_idx == self._target_wall_idx) & (
            np.abs(along - c.target_center) <= half
        )
        vt_top = size / 2.0 + self.focal * (c.camera_height - (c.target_height + half)) / depth
        vt_bot = size / 2.0 + self.focal * (c.camera_height - (c.target_height - half)) / depth
        target_band = wall_band & on_target_col[None, :] & (rows >= vt_top) & (rows < vt_bot)

        img = np.empty((size, size, 3), np.float32)
        img[:] = PALETTE["floor"]
        above = np.broadcast_to(rows, (size, size)) < v_top[None, :]
        img[above] = PALETTE["ceiling"]
        wall_colors = self._wall_palette[wall_idx].astype(np.float32)
        img[wall_band] = np.broadcast_to(wall_colors[None, :, :], (size, size, 3))[wall_band]
        img[target_band] = PALETTE["target"]
        return img

    # ------------------------------------------------------------ features

    def relative_target(self, pose: RobotPose) -> np.ndarray:
        """Target center relative to the camera, robot frame (fwd, left, up)."""
        dx = self.target_center_xyz[0] - pose.x
        dy = self.target_center_xyz[1] - pose.y
        dz = self.target_center_xyz[2] - self.config.camera_height
        cos_psi, sin_psi = math.cos(pose.psi), math.sin(pose.psi)
        return np.array([dx * cos_psi + dy * sin_psi, -dx * sin_psi + dy * cos_psi, dz])

    def feature_pose(self, pose: RobotPose) -> FeaturePose:
        r, theta, phi = cartesian_to_feature(self.relative_target(pose))
        return FeaturePose(r, theta, phi, wrap_angle(pose.psi - self._facing))

    def reward(self, pose: RobotPose) -> float:
        """Minus the 3D camera-to-target distance; equals -feature_pose(pose).r."""
        return -float(np.linalg.norm(self.relative_target(pose)))

    # ----------------------------------------------------------- visibility

    def target_visible(self, pose: RobotPose) -> bool:
        """True when the rendered image contains at least one target pixel."""
        return bool(target_pixel_mask(self.render(pose)).any())

    def target_in_fov(self, pose: RobotPose) -> bool:
        """Pure angular predicate: the patch's horizontal span meets the FoV cone.

        Exact up to pixel discretization; `target_visible` is the pixel-level
        truth. Assumes the camera height lies inside the patch's vertical span
        (true for the default geometry), making visibility purely horizontal.
        """
        c = self.config
        half = 0.5 * c.target_width
        if self._target_wall_idx % 2 == 0:  # east/west: span along y
            edges = [(self.target_center_xyz[0], c.target_center - half),
                     (self.target_center_xyz[0], c.target_center + half)]
        else:
            edges = [(c.target_center - half, self.target_center_xyz[1]),
                     (c.target_center + half, self.target_center_xyz[1])]
        bearings = sorted(
            wrap_angle(math.atan2(ey - pose.y, ex - pose.x) - pose.psi) for ex, ey in edges
        )
        if bearings[1] - bearings[0] > math.pi:  # interval wraps behind the camera
            return False
        half_fov = 0.5 * c.fov
        return bearings[0] <= half_fov and bearings[1] >= -half_fov

    def goal_pose(self, standoff: float) -> RobotPose:
        """Viewing pose `standoff` meters off the target wall, facing the patch."""
        gx = self.target_center_xyz[0] - standoff * math.cos(self._facing)
        gy = self.target_center_xyz[1] - standoff * math.sin(self._facing)
        return RobotPose(float(gx), float(gy), self._facing)
