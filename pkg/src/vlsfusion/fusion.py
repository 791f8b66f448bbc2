"""Loosely coupled fusion of VIO odometry with absolute VLS poses.

The engine keeps two sliding windows: a keyframe window of validated VLS
results and a common-frame window spanning the same time range. Each
keyframe result triggers validation, a drift re-estimate and a two-step
pose-graph optimization over the common window.
"""

from __future__ import annotations

import math
import time
import warnings
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import pgo
from .geometry import (
    DegenerateConfiguration,
    Pose,
    Trajectory,
    compose,
    inverse,
    quat_mul,
    quat_conj,
    quat_to_rotvec,
    rotation_angle,
    umeyama_align,
)
from .pgo import GraphProblem, NotInitialized, PgoConfig


class MissingVls(ValueError):
    pass


class TooFewSamples(ValueError):
    pass


class TooFewKeyframes(ValueError):
    pass


class EmptyWindow(ValueError):
    pass


@dataclass
class FrameState:
    timestamp: float
    vio_pose: Pose
    fused: Pose | None = None
    is_keyframe: bool = False


@dataclass
class KeyFrameRecord:
    frame: FrameState
    vls: Pose | None = None
    inlier_count: int = 0
    valid: bool = False
    drift_sample: Pose | None = None

    def __post_init__(self):
        if self.vls is not None and self.drift_sample is None:
            self.drift_sample = compute_drift_sample(self)
        if self.valid and self.vls is None:
            raise ValueError("a valid keyframe needs a VLS pose")

    @property
    def timestamp(self) -> float:
        return self.frame.timestamp


@dataclass(frozen=True)
class DriftDistribution:
    mean: Pose
    sigma_t: float
    sigma_r: float
    n_samples: int


@dataclass(frozen=True)
class FusionConfig:
    pgo: PgoConfig = field(default_factory=PgoConfig)
    D_v: float = 1.0  # meters
    R_v_deg: float = 5.0
    min_cluster: int = 5
    kmeans_k: int = 2
    kmeans_lambda: float = 1.0  # m/rad
    kmeans_iterations: int = 20
    merge_radius: float = 1.0
    init_buffer: int = 40
    reinit_after: int = 20
    ransac_sets: int = 100
    ransac_set_size: int = 4
    sigma_t_floor: float = 0.05
    sigma_r_floor: float = math.radians(0.5)
    seed: int = 0


# ---------------------------------------------------------------------------
# drift


def compute_drift_sample(kf: KeyFrameRecord) -> Pose:
    """VIO-to-VLS transform implied by one keyframe."""
    if kf.vls is None:
        raise MissingVls(f"keyframe at t={kf.timestamp} has no VLS result")
    return compose(kf.vls, inverse(kf.frame.vio_pose))


def mean_pose(poses: Sequence[Pose]) -> Pose:
    """Arithmetic mean translation with a sign-aligned chordal quaternion mean."""
    if not poses:
        raise TooFewSamples("no poses to average")
    q = np.array([p.q for p in poses])
    q = q * np.where(q @ q[0] < 0, -1.0, 1.0)[:, None]
    qm = q.sum(axis=0)
    return Pose(qm / np.linalg.norm(qm), np.mean([p.t for p in poses], axis=0))


def drift_residual(sample: Pose, mean: Pose) -> tuple[float, float]:
    """Translation norm and rotation angle of ``sample * mean^-1``."""
    r = compose(sample, inverse(mean))
    return float(np.linalg.norm(r.t)), rotation_angle(r.q)


def update_drift_distribution(
    samples: Sequence[Pose], sigma_t_floor: float = 0.05, sigma_r_floor: float = math.radians(0.5)
) -> DriftDistribution:
    if len(samples) < 2:
        raise TooFewSamples(f"need at least 2 drift samples, got {len(samples)}")
    mean = mean_pose(samples)
    res = np.array([drift_residual(s, mean) for s in samples])
    sigma_t = math.sqrt(float(np.mean(res[:, 0] ** 2)))
    sigma_r = math.sqrt(float(np.mean(res[:, 1] ** 2)))
    return DriftDistribution(mean, max(sigma_t, sigma_t_floor), max(sigma_r, sigma_r_floor), len(samples))


def _features(samples: Sequence[Pose], lam: float) -> np.ndarray:
    return np.array([np.concatenate([s.t, lam * quat_to_rotvec(s.q)]) for s in samples])


def initialize(
    drift_samples: Sequence[Pose],
    min_cluster: int = 5,
    k: int = 2,
    lam: float = 1.0,
    seed: int = 0,
    iterations: int = 20,
    merge_radius: float = 1.0,
) -> tuple[Pose, list[int]] | None:
    """Cluster drift samples; ``None`` means not ready yet.

    Clusters whose centres lie within ``merge_radius`` of the largest one are
    folded into it, so one tight group split by K-Means still counts whole.
    The group is then trimmed to samples within ``merge_radius`` of a robust
    centre (medoid start, re-centred on the survivors), since K-Means with a
    small ``k`` happily absorbs a stray outlier into the main cluster.
    """
    from sklearn.cluster import KMeans

    n = len(drift_samples)
    if n < min_cluster:
        return None
    X = _features(drift_samples, lam)
    k_eff = min(k, len(np.unique(np.round(X, 12), axis=0)))
    if k_eff <= 1:
        labels = np.zeros(n, dtype=int)
        centres = X.mean(axis=0, keepdims=True)
    else:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            km = KMeans(n_clusters=k_eff, n_init=1, max_iter=iterations, random_state=seed).fit(X)
        labels, centres = km.labels_, km.cluster_centers_
    sizes = np.bincount(labels, minlength=len(centres))
    best = int(np.argmax(sizes))
    close = np.linalg.norm(centres - centres[best], axis=1) <= merge_radius
    group = np.array([i for i in range(n) if close[labels[i]]])
    G = X[group]
    centre = G[np.argmin(np.linalg.norm(G[:, None] - G[None], axis=-1).sum(axis=1))]
    keep = np.ones(len(group), dtype=bool)
    for _ in range(iterations):
        new_keep = np.linalg.norm(G - centre, axis=1) <= merge_radius
        if not new_keep.any() or np.array_equal(new_keep, keep):
            keep = new_keep if new_keep.any() else keep
            break
        keep = new_keep
        centre = G[keep].mean(axis=0)
    members = group[keep].tolist()
    if len(members) < min_cluster:
        return None
    return mean_pose([drift_samples[i] for i in members]), members


def check_reinit(consecutive_failures: int, limit: int = 20) -> bool:
    return consecutive_failures > limit


# ---------------------------------------------------------------------------
# validation


def relative_checks(prev: KeyFrameRecord, cur: KeyFrameRecord) -> tuple[float, float]:
    """Translation and rotation disagreement between relative VIO and relative VLS motion."""
    if prev.vls is None or cur.vls is None:
        raise MissingVls("both keyframes need VLS results")
    rel_o = compose(inverse(cur.frame.vio_pose), prev.frame.vio_pose)
    rel_l = compose(inverse(cur.vls), prev.vls)
    dt = float(np.linalg.norm(rel_o.t - rel_l.t))
    dr = rotation_angle(quat_mul(rel_o.q, quat_conj(rel_l.q)))
    return dt, dr


def validation_checks(
    prev: KeyFrameRecord, cur: KeyFrameRecord, dist: DriftDistribution, D_v: float = 1.0, R_v: float = 5.0
) -> tuple[bool, bool, bool]:
    """Individual verdicts: relative translation, relative rotation, 3-sigma drift gate."""
    dt, dr = relative_checks(prev, cur)
    et, er = drift_residual(cur.drift_sample, dist.mean)
    return (
        dt < D_v,
        dr < math.radians(R_v),
        et < 3.0 * dist.sigma_t and er < 3.0 * dist.sigma_r,
    )


def validate_keyframe(
    prev: KeyFrameRecord, cur: KeyFrameRecord, dist: DriftDistribution, D_v: float = 1.0, R_v: float = 5.0
) -> bool:
    return all(validation_checks(prev, cur, dist, D_v, R_v))


# ---------------------------------------------------------------------------
# drift RANSAC


def drift_ransac(
    keyframes: Sequence[KeyFrameRecord], n_sets: int = 100, set_size: int = 4, seed=0
) -> tuple[Pose, np.ndarray]:
    """Best VIO-to-VLS alignment over random keyframe subsets plus per-keyframe weights."""
    N = len(keyframes)
    if N < set_size or any(kf.vls is None for kf in keyframes):
        raise TooFewKeyframes(f"need {set_size} keyframes with VLS results, got {N}")
    src = np.array([kf.frame.vio_pose.t for kf in keyframes])
    dst = np.array([kf.vls.t for kf in keyframes])
    rng = np.random.default_rng(seed)
    best, best_err = None, np.inf
    for _ in range(n_sets):
        pick = rng.choice(N, set_size, replace=False)
        try:
            T = umeyama_align(src[pick], dst[pick])
        except DegenerateConfiguration:
            continue
        err = float(np.linalg.norm(src @ T.R.T + T.t - dst, axis=1).sum())
        if err < best_err:
            best, best_err = T, err
    if best is None:
        # every subset was collinear; fall back to the full set, then to translation only
        try:
            best = umeyama_align(src, dst)
        except DegenerateConfiguration:
            best = Pose(np.array([1.0, 0, 0, 0]), (dst - src).mean(axis=0))
    err = np.linalg.norm(src @ best.R.T + best.t - dst, axis=1)
    return best, 1.0 / (err + 1.0)


# ---------------------------------------------------------------------------
# windows and output


def middle_index(timestamps: Sequence[float]) -> int:
    """Frame nearest the temporal midpoint; ties go to the newer frame."""
    ts = np.asarray(timestamps, dtype=float)
    if len(ts) == 0:
        raise EmptyWindow("no frames in window")
    d = np.abs(ts - 0.5 * (ts[0] + ts[-1]))
    return int(np.flatnonzero(d <= d.min() + 1e-9 * max(1.0, ts[-1] - ts[0]))[-1])


def output_pose(frames: Sequence[FrameState]) -> tuple[float, Pose]:
    if not frames:
        raise EmptyWindow("no frames in window")
    f = frames[middle_index([f.timestamp for f in frames])]
    return f.timestamp, f.fused


def prior_for_next_vls(frames: Sequence[FrameState]) -> Pose:
    if not frames:
        raise EmptyWindow("no frames in window")
    return frames[-1].fused


@dataclass
class WindowSync:
    keyframes: list[KeyFrameRecord]
    optimize: list[FrameState]  # common window, time-ordered
    initial_only: list[FrameState]  # newer than the newest keyframe


def sync_windows(
    keyframes: list[KeyFrameRecord], frames: list[FrameState], new_keyframe: KeyFrameRecord | None,
    kf_window: int, T_d: Pose,
) -> WindowSync:
    """Insert a valid keyframe, trim both windows and split the common frames."""
    kfs = list(keyframes)
    if new_keyframe is not None:
        kfs.append(new_keyframe)
    kfs = kfs[-kf_window:]
    if not kfs:
        return WindowSync(kfs, [], [f for f in frames])
    t0, t1 = kfs[0].timestamp, kfs[-1].timestamp
    opt = [f for f in frames if t0 <= f.timestamp <= t1]
    newer = [f for f in frames if f.timestamp > t1]
    for f in newer:
        f.fused = compose(T_d, f.vio_pose)
    return WindowSync(kfs, opt, newer)


def build_problem(frames: Sequence[FrameState], keyframes: Sequence[KeyFrameRecord], beta) -> GraphProblem:
    if any(f.fused is None for f in frames):
        raise NotInitialized("a frame in the window has no fused state")
    p = np.array([f.fused.t for f in frames])
    q = np.array([f.fused.q for f in frames])
    vp = np.array([f.vio_pose.t for f in frames])
    vq = np.array([f.vio_pose.q for f in frames])
    index = {id(f): i for i, f in enumerate(frames)}
    idx = [index[id(kf.frame)] for kf in keyframes]
    return GraphProblem.from_vio(
        p, q, vp, vq, idx,
        np.array([kf.vls.t for kf in keyframes]).reshape(-1, 3),
        np.array([kf.vls.q for kf in keyframes]).reshape(-1, 4),
        beta,
    )


# ---------------------------------------------------------------------------
# engine


class FusionEngine:
    """Single-threaded fusion loop: feed frames and VLS results, collect fused poses."""

    def __init__(self, config: FusionConfig | None = None, diagnostics: Callable[[dict], None] | None = None):
        self.config = config or FusionConfig()
        self._sink = diagnostics
        self.frames: list[FrameState] = []
        self.keyframes: list[KeyFrameRecord] = []
        self.candidates: list[KeyFrameRecord] = []
        self.drift: DriftDistribution | None = None
        self.initialized = False
        self.failures = 0
        self.reinit_count = 0
        self.init_count = 0
        self.outputs: list[tuple[float, Pose]] = []
        self.tick_ms: list[float] = []
        self.records: list[dict] = []
        self._emitted = -math.inf
        self._ticks = 0
        self._optimized_once = False

    # inputs -------------------------------------------------------------

    def add_frame(self, timestamp: float, vio_pose: Pose, is_keyframe: bool = False) -> FrameState:
        if self.frames and timestamp <= self.frames[-1].timestamp:
            raise ValueError("frames must arrive in increasing timestamp order")
        f = FrameState(float(timestamp), vio_pose, None, bool(is_keyframe))
        if self.initialized:
            f.fused = compose(self.drift.mean, vio_pose)
        self.frames.append(f)
        return f

    def prior(self) -> Pose | None:
        """Prior for the next VLS request: the newest frame's fused state."""
        if not self.initialized or not self.frames:
            return None
        return prior_for_next_vls(self.frames)

    def add_vls_result(self, frame: FrameState, pose: Pose | None, inlier_count: int = 0) -> dict:
        t_start = time.perf_counter()
        kf = KeyFrameRecord(frame, pose, int(inlier_count))
        rec: dict = {"t": frame.timestamp, "vls_ok": pose is not None, "inliers": int(inlier_count)}
        if not self.initialized:
            self._pre_init(kf, rec)
        else:
            self._post_init(kf, rec)
        rec["initialized"] = self.initialized
        rec["failures"] = self.failures
        rec["ms"] = (time.perf_counter() - t_start) * 1e3
        self._log(rec)
        return rec

    def finish(self) -> list[tuple[float, Pose]]:
        """Emit every remaining frame that has a fused state."""
        self._emit_until(math.inf)
        return self.outputs

    def fused_trajectory(self) -> Trajectory:
        return Trajectory.from_pairs(self.outputs)

    # internals ----------------------------------------------------------

    def _log(self, rec: dict) -> None:
        self.records.append(rec)
        if self._sink is not None:
            self._sink(rec)

    def _pre_init(self, kf: KeyFrameRecord, rec: dict) -> None:
        cfg = self.config
        rec["event"] = "init_wait"
        if kf.vls is None:
            self.failures += 1
            return
        self.candidates.append(kf)
        self.candidates = self.candidates[-cfg.init_buffer:]
        res = initialize(
            [c.drift_sample for c in self.candidates], cfg.min_cluster, cfg.kmeans_k, cfg.kmeans_lambda,
            cfg.seed, cfg.kmeans_iterations, cfg.merge_radius,
        )
        if res is None:
            return
        _, members = res
        kfs = [self.candidates[i] for i in members][-cfg.pgo.kf_window:]
        for k in kfs:
            k.valid = True
        self.candidates = []
        self.keyframes = kfs
        self.drift = update_drift_distribution(
            [k.drift_sample for k in kfs], cfg.sigma_t_floor, cfg.sigma_r_floor
        )
        T_d = self.drift.mean
        self.initialized = True
        self.failures = 0
        self.init_count += 1
        for f in self.frames:
            if f.fused is None:
                f.fused = compose(T_d, f.vio_pose)
        rec["event"] = "initialized"
        rec["members"] = len(kfs)
        self._optimize(None, rec)

    def _post_init(self, kf: KeyFrameRecord, rec: dict) -> None:
        cfg = self.config
        new = None
        if kf.vls is not None:
            prev = self.keyframes[-1]
            checks = validation_checks(prev, kf, self.drift, cfg.D_v, cfg.R_v_deg)
            rec["checks"] = list(checks)
            kf.valid = all(checks)
        rec["valid"] = kf.valid
        if kf.valid:
            new = kf
            self.failures = 0
        else:
            self.failures += 1
            if check_reinit(self.failures, cfg.reinit_after):
                self._reinit(rec)
                return
        self._optimize(new, rec)

    def _reinit(self, rec: dict) -> None:
        self._emit_until(math.inf)
        self.keyframes = []
        self.candidates = []
        self.drift = None
        self.initialized = False
        self.failures = 0
        self.reinit_count += 1
        self._trim()
        rec["event"] = "reinit"

    def _optimize(self, new: KeyFrameRecord | None, rec: dict) -> None:
        cfg = self.config
        t0 = time.perf_counter()
        if new is not None:
            kfs = (self.keyframes + [new])[-cfg.pgo.kf_window:]
            self.drift = update_drift_distribution(
                [k.drift_sample for k in kfs], cfg.sigma_t_floor, cfg.sigma_r_floor
            )
        sync = sync_windows(self.keyframes, self.frames, new, cfg.pgo.kf_window, self.drift.mean)
        self.keyframes = sync.keyframes
        rec.setdefault("event", "tick")
        rec["n_kf"] = len(sync.keyframes)
        rec["n_frames"] = len(sync.optimize)
        if len(sync.optimize) >= 2:
            if len(sync.keyframes) >= cfg.ransac_set_size:
                _, beta = drift_ransac(sync.keyframes, cfg.ransac_sets, cfg.ransac_set_size, [cfg.seed, self._ticks])
            else:
                beta = np.ones(len(sync.keyframes))
            prob = build_problem(sync.optimize, sync.keyframes, beta)
            prob, tr1 = pgo.pgo_step1(prob, cfg.pgo)
            prob, tr2 = pgo.pgo_step2(prob, cfg.pgo)
            for i, f in enumerate(sync.optimize):
                f.fused = Pose(prob.q[i], prob.p[i])
            rec["beta"] = [round(float(b), 6) for b in beta]
            rec["cost_before"] = tr1.costs[0]
            rec["cost_after"] = tr2.costs[-1] if tr2.costs else tr1.costs[-1]
            rec["iterations"] = [tr1.iterations, tr2.iterations]
            rec["monotone"] = tr1.monotone and tr2.monotone
            self._ticks += 1
            self._optimized_once = True
            self.tick_ms.append((time.perf_counter() - t0) * 1e3)
            ts_mid, _ = output_pose(sync.optimize)
            self._emit_until(ts_mid)
        self._trim()

    def _emit_until(self, ts: float) -> None:
        for f in self.frames:
            if self._emitted < f.timestamp <= ts and f.fused is not None:
                self.outputs.append((f.timestamp, f.fused))
                self._emitted = f.timestamp

    def _trim(self) -> None:
        """Drop frames that are both emitted and older than the keyframe window."""
        start = self.keyframes[0].timestamp if self.keyframes else math.inf
        self.frames = [f for f in self.frames if f.timestamp > self._emitted or f.timestamp >= start]
