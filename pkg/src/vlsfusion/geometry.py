"""SE(3) poses, quaternion helpers, Umeyama alignment and trajectory metrics.

Conventions used throughout the package:

- quaternions are stored ``(w, x, y, z)``, Hamilton product, canonical sign ``w >= 0``;
- a :class:`Pose` maps body coordinates into the reference frame,
  ``x_ref = R(q) @ x_body + t``;
- angles are radians internally and degrees only at reporting boundaries.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np


class DegenerateConfiguration(ValueError):
    """Point sets too degenerate to fix a rigid transform."""


class NoAssociations(ValueError):
    """Two trajectories share fewer than two associable timestamps."""


# ---------------------------------------------------------------------------
# quaternion helpers (plain arrays, shape (4,) or (..., 4))


def quat_mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    aw, ax, ay, az = np.moveaxis(np.asarray(a, dtype=float), -1, 0)
    bw, bx, by, bz = np.moveaxis(np.asarray(b, dtype=float), -1, 0)
    return np.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        axis=-1,
    )


def quat_conj(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    return q * np.array([1.0, -1.0, -1.0, -1.0])


def quat_canonical(q: np.ndarray) -> np.ndarray:
    """Normalize and flip to the ``w >= 0`` hemisphere."""
    q = np.asarray(q, dtype=float)
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    sign = np.where(q[..., :1] < 0.0, -1.0, 1.0)
    return q * sign


def quat_to_rot(q: np.ndarray) -> np.ndarray:
    w, x, y, z = np.moveaxis(np.asarray(q, dtype=float), -1, 0)
    return np.stack(
        [
            np.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], -1),
            np.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], -1),
            np.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], -1),
        ],
        axis=-2,
    )


def rot_to_quat(R: np.ndarray) -> np.ndarray:
    """Shepperd's method; returns a canonical quaternion."""
    R = np.asarray(R, dtype=float)
    tr = R[0, 0] + R[1, 1] + R[2, 2]
    if tr > 0.0:
        s = 2.0 * math.sqrt(tr + 1.0)
        q = [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = 2.0 * math.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        q = [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
    elif R[1, 1] > R[2, 2]:
        s = 2.0 * math.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        q = [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
    else:
        s = 2.0 * math.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        q = [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
    return quat_canonical(np.array(q))


def quat_from_rotvec(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    angle = np.linalg.norm(v, axis=-1, keepdims=True)
    half = 0.5 * angle
    # sin(x/2)/x with its series near zero
    small = angle < 1e-8
    k = np.where(small, 0.5 - angle**2 / 48.0, np.sin(half) / np.where(small, 1.0, angle))
    return np.concatenate([np.cos(half), k * v], axis=-1)


def quat_to_rotvec(q: np.ndarray) -> np.ndarray:
    q = quat_canonical(q)
    w = np.clip(q[..., :1], -1.0, 1.0)
    v = q[..., 1:]
    s = np.linalg.norm(v, axis=-1, keepdims=True)
    angle = 2.0 * np.arctan2(s, w)
    small = s < 1e-12
    k = np.where(small, 2.0 / np.maximum(w, 1e-300), angle / np.where(small, 1.0, s))
    return k * v


def skew(v: np.ndarray) -> np.ndarray:
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


# ---------------------------------------------------------------------------
# Pose


@dataclass(frozen=True, eq=False)
class Pose:
    """Rigid transform body -> reference as a unit quaternion and a translation."""

    q: np.ndarray
    t: np.ndarray

    def __post_init__(self) -> None:
        q = np.array(self.q, dtype=float).reshape(4)
        n = np.linalg.norm(q)
        if not np.isfinite(n) or n < 1e-12:
            raise ValueError(f"invalid quaternion {self.q!r}")
        if abs(n - 1.0) > 4 * np.finfo(float).eps:
            # already-unit inputs are kept bit-exact so serialization round-trips
            q = q / n
        if q[0] < 0.0:
            q = -q
        t = np.array(self.t, dtype=float).reshape(3)
        q.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "t", t)

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.array([1.0, 0.0, 0.0, 0.0]), np.zeros(3))

    @classmethod
    def from_matrix(cls, T: np.ndarray) -> "Pose":
        T = np.asarray(T, dtype=float)
        return cls(rot_to_quat(T[:3, :3]), T[:3, 3])

    @classmethod
    def from_rt(cls, R: np.ndarray, t: np.ndarray) -> "Pose":
        return cls(rot_to_quat(R), t)

    @classmethod
    def from_rotvec(cls, rotvec: Sequence[float], t: Sequence[float] = (0.0, 0.0, 0.0)) -> "Pose":
        return cls(quat_from_rotvec(np.asarray(rotvec, dtype=float)), t)

    @property
    def R(self) -> np.ndarray:
        return quat_to_rot(self.q)

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.R
        T[:3, 3] = self.t
        return T

    def __matmul__(self, other: "Pose") -> "Pose":
        return compose(self, other)

    def allclose(self, other: "Pose", atol: float = 1e-9) -> bool:
        return bool(
            np.allclose(self.t, other.t, atol=atol, rtol=0)
            and rotation_angle(quat_mul(quat_conj(self.q), other.q)) <= atol
        )

    def __repr__(self) -> str:
        q = ", ".join(f"{v:.6g}" for v in self.q)
        t = ", ".join(f"{v:.6g}" for v in self.t)
        return f"Pose(q=[{q}], t=[{t}])"


def compose(a: Pose, b: Pose) -> Pose:
    """Homogeneous product ``a @ b``."""
    return Pose(quat_mul(a.q, b.q), a.R @ b.t + a.t)


def inverse(p: Pose) -> Pose:
    qi = quat_conj(p.q)
    return Pose(qi, -(quat_to_rot(qi) @ p.t))


def apply(p: Pose, x: np.ndarray) -> np.ndarray:
    """Map point(s) ``x`` (shape (3,) or (N, 3)) through ``p``."""
    x = np.asarray(x, dtype=float)
    return x @ p.R.T + p.t


def rotation_angle(q: np.ndarray) -> float:
    """Rotation angle of ``q`` in radians, in [0, pi]."""
    q = np.asarray(q, dtype=float)
    q = q / np.linalg.norm(q)
    # atan2 form keeps precision near zero where acos does not
    return float(2.0 * math.atan2(np.linalg.norm(q[1:]), abs(q[0])))


def rotation_angle_deg(q: np.ndarray) -> float:
    return math.degrees(rotation_angle(q))


def quat_vec(q: np.ndarray) -> np.ndarray:
    """Vector part ``(x, y, z)`` of the canonical-sign quaternion."""
    return quat_canonical(q)[..., 1:]


def pose_angle_between(a: Pose, b: Pose) -> float:
    return rotation_angle(quat_mul(quat_conj(a.q), b.q))


# ---------------------------------------------------------------------------
# Umeyama


def umeyama_align(src: np.ndarray, dst: np.ndarray) -> Pose:
    """Rigid (scale 1) transform ``T`` minimizing ``sum |T src_i - dst_i|^2``."""
    src = np.asarray(src, dtype=float).reshape(-1, 3)
    dst = np.asarray(dst, dtype=float).reshape(-1, 3)
    if src.shape != dst.shape:
        raise ValueError(f"shape mismatch {src.shape} vs {dst.shape}")
    if len(src) < 3:
        raise DegenerateConfiguration(f"need at least 3 point pairs, got {len(src)}")
    mu_s = src.mean(axis=0)
    mu_d = dst.mean(axis=0)
    xs = src - mu_s
    xd = dst - mu_d
    scale = max(np.abs(xs).max(), np.abs(xd).max(), 1.0)
    sv_src = np.linalg.svd(xs, compute_uv=False)
    sv_dst = np.linalg.svd(xd, compute_uv=False)
    tol = 1e-9 * scale * math.sqrt(len(src))
    if sv_src[1] <= tol or sv_dst[1] <= tol:
        raise DegenerateConfiguration("point set is collinear or coincident (rank < 2)")
    cov = xd.T @ xs / len(src)
    U, _, Vt = np.linalg.svd(cov)
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1.0
    R = U @ S @ Vt
    return Pose.from_rt(R, mu_d - R @ mu_s)


# ---------------------------------------------------------------------------
# Trajectory


@dataclass(frozen=True, eq=False)
class Trajectory:
    """Timestamped poses with strictly increasing timestamps."""

    timestamps: np.ndarray
    poses: tuple[Pose, ...]

    def __post_init__(self) -> None:
        ts = np.array(self.timestamps, dtype=float).reshape(-1)
        poses = tuple(self.poses)
        if len(ts) != len(poses):
            raise ValueError(f"{len(ts)} timestamps for {len(poses)} poses")
        if len(ts) > 1 and not np.all(np.diff(ts) > 0):
            raise ValueError("timestamps must be strictly increasing")
        ts.flags.writeable = False
        object.__setattr__(self, "timestamps", ts)
        object.__setattr__(self, "poses", poses)

    @classmethod
    def from_pairs(cls, pairs: Iterable[tuple[float, Pose]]) -> "Trajectory":
        pairs = list(pairs)
        return cls(np.array([p[0] for p in pairs], dtype=float), tuple(p[1] for p in pairs))

    def __len__(self) -> int:
        return len(self.poses)

    def __iter__(self):
        return iter(zip(self.timestamps.tolist(), self.poses))

    def __getitem__(self, i: int) -> tuple[float, Pose]:
        return float(self.timestamps[i]), self.poses[i]

    def positions(self) -> np.ndarray:
        if not self.poses:
            return np.zeros((0, 3))
        return np.stack([p.t for p in self.poses])

    def quaternions(self) -> np.ndarray:
        if not self.poses:
            return np.zeros((0, 4))
        return np.stack([p.q for p in self.poses])

    def transformed(self, T: Pose) -> "Trajectory":
        """Left-multiply every pose by ``T``."""
        return Trajectory(self.timestamps, tuple(compose(T, p) for p in self.poses))

    def write_tum(self, path: str | Path) -> None:
        write_tum(self, path)


def associate(
    est_ts: np.ndarray, ref_ts: np.ndarray, max_dt: float = 0.01
) -> tuple[np.ndarray, np.ndarray]:
    """Nearest-neighbour timestamp association within ``max_dt`` seconds.

    Returns index arrays ``(i_est, i_ref)``; each reference index is used at most once.
    """
    est_ts = np.asarray(est_ts, dtype=float)
    ref_ts = np.asarray(ref_ts, dtype=float)
    if len(est_ts) == 0 or len(ref_ts) == 0:
        return np.zeros(0, dtype=int), np.zeros(0, dtype=int)
    pos = np.searchsorted(ref_ts, est_ts)
    lo = np.clip(pos - 1, 0, len(ref_ts) - 1)
    hi = np.clip(pos, 0, len(ref_ts) - 1)
    pick = np.where(np.abs(ref_ts[lo] - est_ts) <= np.abs(ref_ts[hi] - est_ts), lo, hi)
    ok = np.abs(ref_ts[pick] - est_ts) <= max_dt + 1e-12
    i_est = np.nonzero(ok)[0]
    i_ref = pick[ok]
    _, first = np.unique(i_ref, return_index=True)
    first.sort()
    return i_est[first], i_ref[first]


def _associated(est: Trajectory, ref: Trajectory, max_dt: float):
    i_est, i_ref = associate(est.timestamps, ref.timestamps, max_dt)
    if len(i_est) < 2:
        raise NoAssociations(f"only {len(i_est)} timestamp pairs within {max_dt} s")
    return i_est, i_ref


def ate_rmse(
    est: Trajectory, ref: Trajectory, align: str = "none", max_dt: float = 0.01
) -> float:
    """Absolute trajectory error (position RMSE) in meters.

    ``align`` is ``"none"`` or ``"rigid6dof"`` (Umeyama, scale fixed to 1).
    """
    i_est, i_ref = _associated(est, ref, max_dt)
    pe = est.positions()[i_est]
    pr = ref.positions()[i_ref]
    if align == "rigid6dof":
        pe = apply(umeyama_align(pe, pr), pe)
    elif align != "none":
        raise ValueError(f"unknown alignment {align!r}")
    return float(np.sqrt(np.mean(np.sum((pe - pr) ** 2, axis=1))))


def pose_errors(
    est: Trajectory, ref: Trajectory, max_dt: float = 0.01
) -> tuple[np.ndarray, np.ndarray]:
    """Per associated frame translation error (m) and rotation error (deg)."""
    i_est, i_ref = _associated(est, ref, max_dt)
    terr = np.linalg.norm(est.positions()[i_est] - ref.positions()[i_ref], axis=1)
    qe = est.quaternions()[i_est]
    qr = ref.quaternions()[i_ref]
    dq = quat_mul(quat_conj(qe), qr)
    rerr = np.degrees(2.0 * np.arctan2(np.linalg.norm(dq[:, 1:], axis=1), np.abs(dq[:, 0])))
    return terr, rerr


def pose_accuracy_buckets(
    est: Trajectory,
    ref: Trajectory,
    thresholds: Sequence[tuple[float, float]],
    max_dt: float = 0.01,
) -> list[float]:
    """Percentage of frames under each ``(meters, degrees)`` threshold pair."""
    terr, rerr = pose_errors(est, ref, max_dt)
    return [float(100.0 * np.mean((terr < d) & (rerr < r))) for d, r in thresholds]


# ---------------------------------------------------------------------------
# TUM text format: "timestamp tx ty tz qx qy qz qw"


def write_tum(traj: Trajectory, path: str | Path) -> None:
    lines = []
    for ts, p in traj:
        w, x, y, z = p.q
        vals = (ts, *p.t, x, y, z, w)
        lines.append(" ".join(f"{v:.9g}" if i else f"{v:.9f}" for i, v in enumerate(vals)))
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


def read_tum(path: str | Path) -> Trajectory:
    pairs = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        vals = line.split()
        if len(vals) != 8:
            raise ValueError(f"{path}:{lineno}: expected 8 fields, got {len(vals)}")
        ts, tx, ty, tz, qx, qy, qz, qw = map(float, vals)
        pairs.append((ts, Pose([qw, qx, qy, qz], [tx, ty, tz])))
    return Trajectory.from_pairs(pairs)
