"""Deterministic synthetic world, camera trajectories, observation rendering and drifting VIO.

Descriptors stand in for learned features: every landmark owns a seeded random
unit vector for local matching (``D`` dims) and another for image retrieval
(``G`` dims). A view of a landmark is its vector plus Gaussian noise, and a
frame's global descriptor is the normalized sum over the visible landmarks, so
retrieval similarity tracks covisibility.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy.interpolate import CubicSpline

from .geometry import Pose, Trajectory, compose, inverse, quat_from_rotvec, quat_mul, rot_to_quat

UP = np.array([0.0, 0.0, 1.0])


@dataclass(frozen=True, eq=False)
class World:
    ids: np.ndarray  # (N,) uint64
    positions: np.ndarray  # (N, 3)
    descriptor_dim: int = 64
    global_dim: int = 256
    rng_seed: int = 0

    def __post_init__(self):
        if len(np.unique(self.ids)) != len(self.ids):
            raise ValueError("landmark ids must be unique")
        if not np.all(np.isfinite(self.positions)):
            raise ValueError("landmark positions must be finite")

    def __len__(self) -> int:
        return len(self.ids)

    @cached_property
    def local_seeds(self) -> np.ndarray:
        """Unit ``D``-vector per landmark; row order follows ``ids``."""
        rng = np.random.default_rng([self.rng_seed, 0xD35C])
        v = rng.standard_normal((len(self.ids), self.descriptor_dim))
        return v / np.linalg.norm(v, axis=1, keepdims=True)

    @cached_property
    def global_seeds(self) -> np.ndarray:
        rng = np.random.default_rng([self.rng_seed, 0x61B])
        v = rng.standard_normal((len(self.ids), self.global_dim))
        return v / np.linalg.norm(v, axis=1, keepdims=True)

    @cached_property
    def row_of(self) -> dict[int, int]:
        return {int(i): r for r, i in enumerate(self.ids)}


@dataclass(frozen=True)
class CameraModel:
    fx: float = 400.0
    fy: float = 400.0
    cx: float = 320.0
    cy: float = 240.0
    width: int = 640
    height: int = 480
    max_range: float = 40.0

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise ValueError("principal point outside the image")

    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def project(self, pose: Pose, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Pixels and depths of world points seen from a camera-to-world ``pose``."""
        pc = (np.asarray(points, dtype=float) - pose.t) @ pose.R
        z = pc[:, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            uv = np.stack(
                [self.fx * pc[:, 0] / z + self.cx, self.fy * pc[:, 1] / z + self.cy], axis=1
            )
        return uv, z


@dataclass(frozen=True)
class NoiseSpec:
    vio_trans_sigma: float = 0.0
    vio_rot_sigma: float = 0.0
    vio_bias_walk: float = 0.0
    pixel_sigma: float = 0.0
    descriptor_sigma: float = 0.0
    vls_outlier_rate: float = 0.0
    # simulated-VLS mode only: Gaussian error on returned absolute poses
    vls_trans_sigma: float = 0.0
    vls_rot_sigma: float = 0.0

    def __post_init__(self):
        for name, value in self.__dict__.items():
            if value < 0:
                raise ValueError(f"{name} must be nonnegative")
        if self.vls_outlier_rate > 1:
            raise ValueError("vls_outlier_rate must be <= 1")


@dataclass(frozen=True, eq=False)
class FrameObservation:
    timestamp: float
    true_pose: Pose
    landmark_ids: np.ndarray  # (K,) uint64
    keypoints: np.ndarray  # (K, 2) pixels
    local_descriptors: np.ndarray  # (K, D) float32, unit rows
    global_descriptor: np.ndarray  # (G,) float32, unit
    is_keyframe: bool = False

    def __len__(self) -> int:
        return len(self.landmark_ids)


@dataclass(frozen=True, eq=False)
class SimTrajectory:
    """Ground-truth trajectory plus per-frame keyframe flags."""

    trajectory: Trajectory
    keyframe: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))

    def __len__(self) -> int:
        return len(self.trajectory)


def generate_world(
    n_landmarks: int,
    extent,
    seed: int,
    descriptor_dim: int = 64,
    global_dim: int = 256,
) -> World:
    """``n_landmarks`` points uniform in the box ``[-extent, +extent]``."""
    if n_landmarks < 0:
        raise ValueError("n_landmarks must be nonnegative")
    extent = np.asarray(extent, dtype=float).reshape(3)
    rng = np.random.default_rng([seed, 0x3D])
    pos = rng.uniform(-extent, extent, size=(n_landmarks, 3))
    return World(
        ids=np.arange(n_landmarks, dtype=np.uint64),
        positions=pos,
        descriptor_dim=descriptor_dim,
        global_dim=global_dim,
        rng_seed=seed,
    )


def look_along(forward: np.ndarray) -> np.ndarray:
    """Camera rotation (x right, y down, z forward) looking along ``forward`` with world +z up."""
    z = forward / np.linalg.norm(forward)
    x = np.cross(z, UP)
    if np.linalg.norm(x) < 1e-9:
        x = np.cross(z, np.array([0.0, 1.0, 0.0]))
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    return np.stack([x, y, z], axis=1)


def _path_function(shape: str, length: float, seed: int, radius_offset: float):
    """Return (position(s), tangent(s), total_length) for arc-length ``s``."""
    if shape == "circle":
        r = length / (2.0 * math.pi)
        rr = r + radius_offset

        def pos(s):
            a = s / r
            return np.stack([rr * np.cos(a), rr * np.sin(a), np.zeros_like(a)], -1)

        def tan(s):
            a = s / r
            return np.stack([-np.sin(a), np.cos(a), np.zeros_like(a)], -1)

        return pos, tan
    if shape in ("figure_eight", "waypoints"):
        if shape == "figure_eight":
            u = np.linspace(0.0, 2.0 * math.pi, 721)
            ctrl = np.stack([np.sin(u), np.sin(u) * np.cos(u), np.zeros_like(u)], -1)
            ctrl[-1] = ctrl[0]  # sin(2 pi) is not exactly zero
        else:
            rng = np.random.default_rng([seed, 0x5A])
            m = 8
            # jittered but evenly spread bearings keep the closed spline free of cusps
            ang = 2 * math.pi * (np.arange(m) + rng.uniform(-0.25, 0.25, m)) / m
            rad = rng.uniform(0.8, 1.0, m)
            pts = np.stack([rad * np.cos(ang), rad * np.sin(ang), np.zeros(m)], -1)
            pts = np.vstack([pts, pts[:1]])
            u = np.linspace(0.0, 1.0, len(pts))
            sp0 = CubicSpline(u, pts, bc_type="periodic")
            u = np.linspace(0.0, 1.0, 2001)
            ctrl = sp0(u)
        seg = np.linalg.norm(np.diff(ctrl, axis=0), axis=1)
        raw_len = seg.sum()
        ctrl = ctrl * (length / raw_len)
        arc = np.concatenate([[0.0], np.cumsum(seg * (length / raw_len))])
        arc[-1] = length
        sp = CubicSpline(arc, ctrl, bc_type="periodic")
        d = sp.derivative()

        def pos(s):
            s = np.asarray(s)
            p = sp(np.mod(s, length))
            if radius_offset:
                t = d(np.mod(s, length))
                n = np.cross(UP, t)
                n /= np.linalg.norm(n, axis=-1, keepdims=True)
                p = p - radius_offset * n
            return p

        def tan(s):
            t = d(np.mod(np.asarray(s), length))
            return t / np.linalg.norm(t, axis=-1, keepdims=True)

        return pos, tan
    raise ValueError(f"unknown trajectory shape {shape!r}")


def generate_trajectory(
    shape: str,
    length: float,
    frame_hz: float,
    keyframe_every: int,
    seed: int = 0,
    speed: float = 5.0,
    start: float = 0.0,
    radius_offset: float = 0.0,
    t0: float = 0.0,
) -> SimTrajectory:
    """Constant-speed camera path with the optical axis along the direction of motion.

    ``start`` shifts the arc-length origin (meters) and ``radius_offset`` moves
    the path sideways, so a query pass can run between mapping frames.
    """
    if frame_hz <= 0 or speed <= 0:
        raise ValueError("frame_hz and speed must be positive")
    if keyframe_every < 1:
        raise ValueError("keyframe_every must be >= 1")
    pos, tan = _path_function(shape, length, seed, radius_offset)
    n = int(math.floor(length / speed * frame_hz)) + 1
    ts = t0 + np.arange(n) / frame_hz
    s = start + speed * (ts - t0)
    P = pos(s)
    Tn = tan(s)
    poses = tuple(Pose(rot_to_quat(look_along(Tn[i])), P[i]) for i in range(n))
    kf = np.zeros(n, dtype=bool)
    kf[::keyframe_every] = True
    return SimTrajectory(Trajectory(ts, poses), kf)


def visible_landmarks(world: World, cam: CameraModel, pose: Pose) -> tuple[np.ndarray, np.ndarray]:
    """Rows of landmarks in front of the camera, inside the image and within range."""
    uv, z = cam.project(pose, world.positions)
    dist = np.linalg.norm(world.positions - pose.t, axis=1)
    with np.errstate(invalid="ignore"):
        ok = (
            (z > 1e-6)
            & (dist <= cam.max_range)
            & (uv[:, 0] >= 0)
            & (uv[:, 0] < cam.width)
            & (uv[:, 1] >= 0)
            & (uv[:, 1] < cam.height)
        )
    rows = np.nonzero(ok)[0]
    return rows, uv[rows]


def render_observations(
    world: World,
    cam: CameraModel,
    pose: Pose,
    noise: NoiseSpec,
    seed: int,
    timestamp: float = 0.0,
    is_keyframe: bool = False,
) -> FrameObservation:
    rows, uv = visible_landmarks(world, cam, pose)
    rng = np.random.default_rng([seed, 0x0B5])
    if noise.pixel_sigma > 0:
        uv = uv + rng.normal(0.0, noise.pixel_sigma, uv.shape)
        inside = (
            (uv[:, 0] >= 0) & (uv[:, 0] < cam.width) & (uv[:, 1] >= 0) & (uv[:, 1] < cam.height)
        )
        rows, uv = rows[inside], uv[inside]
    desc = world.local_seeds[rows]
    if noise.descriptor_sigma > 0:
        desc = desc + rng.normal(0.0, noise.descriptor_sigma, desc.shape)
        desc = desc / np.linalg.norm(desc, axis=1, keepdims=True)
    g = world.global_seeds[rows].sum(axis=0) if len(rows) else np.zeros(world.global_dim)
    if noise.descriptor_sigma > 0:
        g = g + rng.normal(0.0, noise.descriptor_sigma * max(1.0, math.sqrt(len(rows))), g.shape)
    gn = np.linalg.norm(g)
    if gn < 1e-12:
        g = np.zeros(world.global_dim)
        g[0] = 1.0
    else:
        g = g / gn
    return FrameObservation(
        timestamp=float(timestamp),
        true_pose=pose,
        landmark_ids=world.ids[rows],
        keypoints=uv,
        local_descriptors=desc.astype(np.float32),
        global_descriptor=g.astype(np.float32),
        is_keyframe=bool(is_keyframe),
    )


def render_trajectory(
    world: World, cam: CameraModel, traj: SimTrajectory, noise: NoiseSpec, seed: int
) -> list[FrameObservation]:
    out = []
    for i, (ts, pose) in enumerate(traj.trajectory):
        kf = bool(traj.keyframe[i]) if len(traj.keyframe) else False
        out.append(render_observations(world, cam, pose, noise, seed * 1_000_003 + i, ts, kf))
    return out


def relative_poses(traj: Trajectory) -> list[Pose]:
    return [compose(inverse(a), b) for a, b in zip(traj.poses[:-1], traj.poses[1:])]


def simulate_vio(true_traj: Trajectory, noise: NoiseSpec, seed: int) -> Trajectory:
    """Drifting odometry expressed in the frame of the first pose.

    Each true step is corrupted in the body frame by white translation noise,
    a slowly random-walking translation bias and a small random rotation.
    """
    if len(true_traj) < 2:
        raise ValueError("need at least two frames")
    rng = np.random.default_rng([seed, 0x710])
    steps = relative_poses(true_traj)
    n = len(steps)
    dt = rng.normal(0.0, noise.vio_trans_sigma, (n, 3)) if noise.vio_trans_sigma else np.zeros((n, 3))
    bias = (
        np.cumsum(rng.normal(0.0, noise.vio_bias_walk, (n, 3)), axis=0)
        if noise.vio_bias_walk
        else np.zeros((n, 3))
    )
    dr = rng.normal(0.0, noise.vio_rot_sigma, (n, 3)) if noise.vio_rot_sigma else np.zeros((n, 3))
    cur = Pose.identity()
    poses = [cur]
    for k, step in enumerate(steps):
        noisy = Pose(quat_mul(step.q, quat_from_rotvec(dr[k])), step.t + dt[k] + bias[k])
        cur = compose(cur, noisy)
        poses.append(cur)
    return Trajectory(true_traj.timestamps, tuple(poses))
