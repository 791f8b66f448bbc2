"""Server-side localization: retrieval, matching, PnP-RANSAC, pose clustering and refinement."""

from __future__ import annotations

import math
from concurrent.futures import Executor
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from . import kernels
from .geometry import Pose, quat_from_rotvec, quat_mul, quat_to_rot
from .mapbuilder import MapIndex, MapLandmark, MapShard, ObservationCone, cone_contains
from .worldsim import CameraModel

MIN_MATCHES = 6


class TooFewMatches(ValueError):
    pass


class NoConsensus(ValueError):
    pass


STAGES = ("none", "bad_request", "retrieval", "matching", "pnp", "clustering", "refinement", "constraint")


@dataclass(frozen=True)
class RetrievalParams:
    k: int = 5
    overfetch_factor: int = 10
    prior_radius: float = 10.0
    nms_radius: float = 1.0

    def __post_init__(self):
        if self.k < 1 or self.overfetch_factor < 1:
            raise ValueError("k and overfetch_factor must be >= 1")
        if self.prior_radius < 0 or self.nms_radius < 0:
            raise ValueError("radii must be nonnegative")


@dataclass(frozen=True)
class ConstraintParams:
    delta_L: float = 5.0
    delta_theta: float = math.radians(10.0)
    camera_radius: float = 20.0
    camera_normal_max_angle: float = math.radians(60.0)

    def __post_init__(self):
        if min(self.delta_L, self.delta_theta, self.camera_radius, self.camera_normal_max_angle) < 0:
            raise ValueError("constraint parameters must be nonnegative")


@dataclass(frozen=True)
class LocalizerParams:
    retrieval: RetrievalParams = field(default_factory=RetrievalParams)
    constraint: ConstraintParams = field(default_factory=ConstraintParams)
    ratio: float = 0.85
    ransac_iterations: int = 200
    reproj_threshold_px: float = 3.0
    dbscan_eps: float = 0.5
    dbscan_min_pts: int = 2
    pose_lambda: float = 1.0  # meters per radian in the pose distance
    huber_px: float = 2.0
    second_pass_gate_px: float = 8.0


@dataclass(frozen=True, eq=False)
class QueryFeatures:
    keypoints: np.ndarray  # (K, 2)
    descriptors: np.ndarray  # (K, D) float32
    global_descriptor: np.ndarray  # (G,) float32


@dataclass(eq=False)
class Matches:
    """A set of 2D-3D matches, one row per match."""

    query_idx: np.ndarray  # (n,) int64
    landmark_ids: np.ndarray  # (n,) uint64
    p3d: np.ndarray  # (n, 3)
    pixels: np.ndarray  # (n, 2)
    distances: np.ndarray  # (n,) descriptor L2 distance

    def __len__(self) -> int:
        return len(self.query_idx)

    def subset(self, rows) -> "Matches":
        return Matches(
            self.query_idx[rows], self.landmark_ids[rows], self.p3d[rows], self.pixels[rows], self.distances[rows]
        )

    @staticmethod
    def empty() -> "Matches":
        return Matches(
            np.zeros(0, np.int64), np.zeros(0, np.uint64), np.zeros((0, 3)), np.zeros((0, 2)), np.zeros(0)
        )

    @staticmethod
    def concat(parts: Sequence["Matches"]) -> "Matches":
        parts = [p for p in parts if len(p)]
        if not parts:
            return Matches.empty()
        return Matches(
            np.concatenate([p.query_idx for p in parts]),
            np.concatenate([p.landmark_ids for p in parts]),
            np.concatenate([p.p3d for p in parts]),
            np.concatenate([p.pixels for p in parts]),
            np.concatenate([p.distances for p in parts]),
        )

    def dedup_by_landmark(self) -> "Matches":
        """One match per landmark id, keeping the smallest descriptor distance."""
        if len(self) == 0:
            return self
        order = np.lexsort((self.distances, self.landmark_ids))
        ids = self.landmark_ids[order]
        first = np.ones(len(ids), dtype=bool)
        first[1:] = ids[1:] != ids[:-1]
        return self.subset(np.sort(order[first]))


@dataclass
class LocalizationResult:
    ok: bool
    pose: Pose | None = None
    inlier_count: int = 0
    stage: str = "none"
    reason: str = ""
    references: list[int] = field(default_factory=list)
    first_pass_inliers: int = 0
    constraint_landmarks: int = 0


ShardSource = Mapping[int, MapShard] | Callable[[int], MapShard]


def _getter(shards: ShardSource) -> Callable[[int], MapShard]:
    if callable(shards) and not isinstance(shards, Mapping):
        return shards
    return lambda image_id: shards[int(image_id)]


def optical_axes(index: MapIndex) -> np.ndarray:
    axes = getattr(index, "_axes", None)
    if axes is None:
        axes = quat_to_rot(index.quaternions)[:, :, 2]
        index._axes = axes
    return axes


# ---------------------------------------------------------------------------
# retrieval


def retrieve_references(
    index: MapIndex,
    query_global: np.ndarray,
    prior: Pose | None,
    params: RetrievalParams,
) -> tuple[list[int], bool]:
    """Reference image ids for a query, and whether fewer than ``k`` were found."""
    if len(index) == 0:
        raise ValueError("empty map index")
    q = np.asarray(query_global, dtype=np.float64)
    g = index.global_descriptors.astype(np.float64)
    norms = np.linalg.norm(g, axis=1) * max(np.linalg.norm(q), 1e-300)
    score = (g @ q) / np.maximum(norms, 1e-300)
    order = np.argsort(-score, kind="stable")
    top = order[: params.overfetch_factor * params.k]
    if prior is not None:
        dist = np.linalg.norm(index.positions[top] - prior.t, axis=1)
        near = top[dist < params.prior_radius]
        if len(near) < params.k:
            rest = top[~np.isin(top, near)]
            near = np.concatenate([near, rest[: params.k - len(near)]])
        # back to global score order
        rank = {int(r): i for i, r in enumerate(top)}
        cand = np.array(sorted(near.tolist(), key=lambda r: rank[int(r)]), dtype=int)
    else:
        cand = top
    kept: list[int] = []
    for r in cand:
        if len(kept) >= params.k:
            break
        if params.nms_radius > 0 and kept:
            d = np.linalg.norm(index.positions[kept] - index.positions[r], axis=1)
            if np.any(d < params.nms_radius):
                continue
        kept.append(int(r))
    ids = [int(index.image_ids[r]) for r in kept]
    return ids, len(ids) < params.k


# ---------------------------------------------------------------------------
# matching


def knn_match_arrays(
    query_descriptors: np.ndarray,
    db_descriptors: np.ndarray,
    db_labels: np.ndarray,
    ratio: float,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Lowe ratio test; the second neighbour must belong to a different label.

    Returns ``(query_rows, db_rows, d1)`` of accepted matches.
    """
    if not (0 < ratio <= 1):
        raise ValueError("ratio must be in (0, 1]")
    best, d1, d2 = kernels.ratio_match(query_descriptors, db_descriptors, db_labels.astype(np.int64))
    with np.errstate(divide="ignore", invalid="ignore"):
        keep = (best >= 0) & (np.isinf(d2) | (d1 < ratio * d2))
    rows = np.nonzero(keep)[0]
    return rows, best[rows], d1[rows]


def knn_match(
    query: QueryFeatures, shard: MapShard, ratio: float = 0.85
) -> Matches:
    rows, db, d1 = knn_match_arrays(query.descriptors, shard.descriptors, shard.ids.view(np.int64), ratio)
    return Matches(
        query_idx=rows.astype(np.int64),
        landmark_ids=shard.ids[db],
        p3d=shard.p3d[db],
        pixels=np.asarray(query.keypoints, dtype=np.float64)[rows],
        distances=d1,
    )


# ---------------------------------------------------------------------------
# PnP


def _normalized(pixels: np.ndarray, cam: CameraModel) -> np.ndarray:
    return np.stack([(pixels[:, 0] - cam.cx) / cam.fx, (pixels[:, 1] - cam.cy) / cam.fy], axis=1)


def dlt_pose(p3d: np.ndarray, xn: np.ndarray) -> Pose | None:
    """Camera-to-world pose from >= 6 correspondences of world points and normalized image points."""
    n = len(p3d)
    c = p3d.mean(axis=0)
    s = np.sqrt(((p3d - c) ** 2).sum(axis=1).mean())
    if s < 1e-9:
        return None
    Xn = (p3d - c) / s
    Xh = np.hstack([Xn, np.ones((n, 1))])
    A = np.zeros((2 * n, 12))
    A[0::2, 0:4] = Xh
    A[0::2, 8:12] = -xn[:, :1] * Xh
    A[1::2, 4:8] = Xh
    A[1::2, 8:12] = -xn[:, 1:] * Xh
    _, sv, Vt = np.linalg.svd(A)
    if sv[-2] < 1e-10 * sv[0]:
        return None
    Pn = Vt[-1].reshape(3, 4)
    # undo point normalization: P = Pn @ [[I/s, -c/s], [0, 1]]
    P = np.hstack([Pn[:, :3] / s, (Pn[:, 3] - Pn[:, :3] @ c / s)[:, None]])
    depth = P[2, :3] @ p3d.T + P[2, 3]
    if np.median(depth) < 0:
        P = -P
    M = P[:, :3]
    U, S, Vt2 = np.linalg.svd(M)
    R = U @ Vt2
    if np.linalg.det(R) < 0:
        return None
    scale = S.mean()
    if scale < 1e-12:
        return None
    tcw = P[:, 3] / scale
    return Pose.from_rt(R.T, -R.T @ tcw)


def _errors(pose: Pose, m: Matches, cam: CameraModel) -> np.ndarray:
    Rcw = pose.R.T
    return kernels.reprojection_errors(Rcw, -Rcw @ pose.t, m.p3d, m.pixels, cam.fx, cam.fy, cam.cx, cam.cy)


def _perturb(pose: Pose, delta: np.ndarray) -> Pose:
    return Pose(quat_mul(pose.q, quat_from_rotvec(delta[3:])), pose.t + delta[:3])


def _robust(s: np.ndarray, huber: float | None) -> float:
    if huber is None:
        return float(0.5 * np.sum(s * s))
    return float(np.sum(np.where(s <= huber, 0.5 * s * s, huber * (s - 0.5 * huber))))


def lm_reprojection(
    pose: Pose,
    m: Matches,
    cam: CameraModel,
    huber: float | None = None,
    max_iterations: int = 30,
    trace: list | None = None,
) -> Pose:
    """Levenberg-Marquardt on the (optionally Huber-robustified) reprojection cost."""
    lam = 1e-3
    r, J, valid = kernels.reprojection_jacobian(pose.R, pose.t, m.p3d, m.pixels, cam.fx, cam.fy, cam.cx, cam.cy)
    if not np.all(valid):
        raise NoConsensus("a match lies behind the camera")
    s = np.linalg.norm(r, axis=1)
    cost = _robust(s, huber)
    if trace is not None:
        trace.append(cost)
    for _ in range(max_iterations):
        w = np.ones_like(s) if huber is None else np.where(s <= huber, 1.0, huber / np.maximum(s, 1e-300))
        Jf = J.reshape(-1, 6)
        wf = np.repeat(w, 2)
        H = Jf.T @ (Jf * wf[:, None])
        g = Jf.T @ (wf * r.reshape(-1))
        if np.max(np.abs(g)) < 1e-14:
            break
        improved = False
        for _ in range(10):
            A = H + lam * np.diag(np.maximum(np.diag(H), 1e-12))
            try:
                delta = np.linalg.solve(A, -g)
            except np.linalg.LinAlgError:
                lam *= 10
                continue
            cand = _perturb(pose, delta)
            rc, Jc, vc = kernels.reprojection_jacobian(
                cand.R, cand.t, m.p3d, m.pixels, cam.fx, cam.fy, cam.cx, cam.cy
            )
            sc = np.linalg.norm(rc, axis=1)
            cc = _robust(sc, huber) if np.all(vc) else np.inf
            if cc <= cost:
                rel = (cost - cc) / max(cost, 1e-300)
                pose, r, J, s, cost = cand, rc, Jc, sc, cc
                lam = max(lam / 3.0, 1e-12)
                improved = True
                if trace is not None:
                    trace.append(cost)
                break
            lam *= 4.0
        if not improved or rel < 1e-12 or np.linalg.norm(delta) < 1e-14:
            break
    return pose


def pnp_ransac(
    matches: Matches,
    cam: CameraModel,
    iterations: int = 200,
    reproj_threshold_px: float = 3.0,
    seed: int | Sequence[int] = 0,
    confidence: float = 0.999,
) -> tuple[Pose, np.ndarray]:
    """Robust pose from 2D-3D matches; returns the pose and a boolean inlier mask."""
    n = len(matches)
    if n < MIN_MATCHES:
        raise TooFewMatches(f"{n} matches, need {MIN_MATCHES}")
    rng = np.random.default_rng(seed)
    xn = _normalized(matches.pixels, cam)
    best_mask = None
    best_count = 0
    needed = iterations
    it = 0
    while it < min(iterations, needed):
        it += 1
        sample = rng.choice(n, MIN_MATCHES, replace=False)
        pose = dlt_pose(matches.p3d[sample], xn[sample])
        if pose is None:
            continue
        mask = _errors(pose, matches, cam) < reproj_threshold_px
        count = int(mask.sum())
        if count > best_count:
            best_count, best_mask = count, mask
            w = count / n
            if w >= 1.0:
                needed = 0
            else:
                denom = math.log(max(1.0 - w**MIN_MATCHES, 1e-300))
                needed = int(math.ceil(math.log(1.0 - confidence) / denom)) if denom < 0 else iterations
    if best_mask is None or best_count < MIN_MATCHES:
        raise NoConsensus(f"best hypothesis has {best_count} inliers")
    inl = matches.subset(best_mask)
    pose = dlt_pose(inl.p3d, xn[best_mask])
    if pose is None:
        raise NoConsensus("degenerate inlier set")
    mask = best_mask
    for _ in range(3):
        pose = lm_reprojection(pose, matches.subset(mask), cam)
        new_mask = _errors(pose, matches, cam) < reproj_threshold_px
        if new_mask.sum() < MIN_MATCHES:
            raise NoConsensus("refined pose lost its inliers")
        if np.array_equal(new_mask, mask):
            break
        mask = new_mask
    mask = _errors(pose, matches, cam) < reproj_threshold_px
    if mask.sum() < MIN_MATCHES:
        raise NoConsensus("refined pose lost its inliers")
    return pose, mask


def refine_pose(
    coarse: Pose,
    matches: Matches,
    cam: CameraModel,
    huber_px: float = 2.0,
    trace: list | None = None,
) -> Pose:
    m = matches.dedup_by_landmark()
    if len(m) < MIN_MATCHES:
        raise TooFewMatches(f"{len(m)} unique landmarks, need {MIN_MATCHES}")
    return lm_reprojection(coarse, m, cam, huber=huber_px, trace=trace)


# ---------------------------------------------------------------------------
# pose clustering


def pose_distance_matrix(poses: Sequence[Pose], lam: float = 1.0) -> np.ndarray:
    t = np.stack([p.t for p in poses])
    q = np.stack([p.q for p in poses])
    return kernels.pose_distance_matrix(t, q, lam)


def dbscan_labels(dist: np.ndarray, eps: float, min_pts: int) -> np.ndarray:
    """Textbook DBSCAN on a precomputed distance matrix; ``-1`` marks noise."""
    n = len(dist)
    labels = np.full(n, -1)
    neighbours = [np.nonzero(dist[i] <= eps)[0] for i in range(n)]
    core = np.array([len(nb) >= min_pts for nb in neighbours], dtype=bool)
    cluster = 0
    for i in range(n):
        if labels[i] != -1 or not core[i]:
            continue
        labels[i] = cluster
        queue = list(neighbours[i])
        while queue:
            j = queue.pop()
            if labels[j] == -1:
                labels[j] = cluster
                if core[j]:
                    queue.extend(int(x) for x in neighbours[j] if labels[x] == -1)
        cluster += 1
    return labels


def dbscan_poses(
    poses: Sequence[Pose],
    eps: float = 0.5,
    min_pts: int = 2,
    lam: float = 1.0,
    weights: Sequence[float] | None = None,
) -> list[int]:
    """Members of the largest DBSCAN cluster (ties: larger summed weight, then earlier cluster)."""
    if len(poses) == 0:
        return []
    labels = dbscan_labels(pose_distance_matrix(poses, lam), eps, min_pts)
    if np.all(labels < 0):
        return []
    w = np.ones(len(poses)) if weights is None else np.asarray(weights, dtype=float)
    best = max(
        range(labels.max() + 1),
        key=lambda c: (int(np.sum(labels == c)), float(w[labels == c].sum()), -c),
    )
    return np.nonzero(labels == best)[0].tolist()


# ---------------------------------------------------------------------------
# observation constraints


def reference_cameras(index: MapIndex, coarse: Pose, params: ConstraintParams) -> list[int]:
    dist = np.linalg.norm(index.positions - coarse.t, axis=1)
    axis = coarse.R[:, 2]
    cosang = np.clip(optical_axes(index) @ axis, -1.0, 1.0)
    ok = (dist < params.camera_radius) & (np.arccos(cosang) < params.camera_normal_max_angle)
    return [int(i) for i in index.image_ids[ok]]


def observation_constraint_landmarks(
    index: MapIndex,
    shards: ShardSource,
    coarse: Pose,
    params: ConstraintParams,
) -> list[MapLandmark]:
    """Landmarks whose visibility cone (with margins) contains the coarse camera position."""
    get = _getter(shards)
    out: dict[int, MapLandmark] = {}
    for image_id in reference_cameras(index, coarse, params):
        sh = get(image_id)
        if len(sh) == 0:
            continue
        ok = cone_contains(sh.p3d, sh.n, sh.theta, sh.L, coarse.t, params.delta_L, params.delta_theta)
        for k in np.nonzero(ok)[0]:
            lid = int(sh.ids[k])
            lm = out.get(lid)
            if lm is None:
                lm = MapLandmark(
                    lid,
                    sh.p3d[k],
                    ObservationCone(sh.n[k].astype(float), float(sh.theta[k]), float(sh.L[k])),
                    [],
                )
                out[lid] = lm
            lm.views.append((image_id, sh.obs2d[k], sh.descriptors[k]))
    return [out[k] for k in sorted(out)]


def _landmark_table(landmarks: Sequence[MapLandmark]):
    labels, p3d, desc = [], [], []
    for lm in landmarks:
        for _, _, d in lm.views:
            labels.append(lm.id)
            p3d.append(lm.p3d)
            desc.append(d)
    if not labels:
        return np.zeros(0, np.uint64), np.zeros((0, 3)), np.zeros((0, 1), np.float32)
    return np.array(labels, dtype=np.uint64), np.stack(p3d), np.stack(desc).astype(np.float32)


def match_landmarks(query: QueryFeatures, landmarks: Sequence[MapLandmark], ratio: float) -> Matches:
    labels, p3d, desc = _landmark_table(landmarks)
    if len(labels) == 0:
        return Matches.empty()
    rows, db, d1 = knn_match_arrays(query.descriptors, desc, labels.view(np.int64), ratio)
    return Matches(
        query_idx=rows.astype(np.int64),
        landmark_ids=labels[db],
        p3d=p3d[db],
        pixels=np.asarray(query.keypoints, dtype=np.float64)[rows],
        distances=d1,
    )


# ---------------------------------------------------------------------------
# full pipeline


def _candidate(query, get, image_id, cam, params: LocalizerParams, seed):
    shard = get(image_id)
    m = knn_match(query, shard, params.ratio)
    if len(m) < MIN_MATCHES:
        return None
    try:
        pose, mask = pnp_ransac(
            m, cam, params.ransac_iterations, params.reproj_threshold_px, seed=[seed, image_id]
        )
    except (TooFewMatches, NoConsensus):
        return None
    return pose, m.subset(mask)


def localize(
    index: MapIndex,
    shards: ShardSource,
    query: QueryFeatures,
    cam: CameraModel,
    prior: Pose | None = None,
    params: LocalizerParams = LocalizerParams(),
    seed: int = 0,
    executor: Executor | None = None,
) -> LocalizationResult:
    """Retrieval, per-reference PnP, clustering, refinement and the constrained second pass."""
    get = _getter(shards)
    if len(query.keypoints) < MIN_MATCHES:
        return LocalizationResult(False, stage="matching", reason=f"{len(query.keypoints)} keypoints")
    refs, _ = retrieve_references(index, query.global_descriptor, prior, params.retrieval)
    if not refs:
        return LocalizationResult(False, stage="retrieval", reason="no reference images")

    if executor is not None and len(refs) > 1:
        futures = [executor.submit(_candidate, query, get, r, cam, params, seed) for r in refs]
        results = [f.result() for f in futures]
    else:
        results = [_candidate(query, get, r, cam, params, seed) for r in refs]
    cands = [c for c in results if c is not None]
    if not cands:
        return LocalizationResult(False, stage="pnp", reason="no reference produced a pose", references=refs)

    members = dbscan_poses(
        [c[0] for c in cands],
        params.dbscan_eps,
        min(params.dbscan_min_pts, len(cands)),
        params.pose_lambda,
        weights=[len(c[1]) for c in cands],
    )
    if not members:
        return LocalizationResult(False, stage="clustering", reason="all candidate poses are noise", references=refs)

    pooled = Matches.concat([cands[i][1] for i in members])
    start = cands[max(members, key=lambda i: len(cands[i][1]))][0]
    try:
        coarse = refine_pose(start, pooled, cam, params.huber_px)
    except (TooFewMatches, NoConsensus) as exc:
        return LocalizationResult(False, stage="refinement", reason=str(exc), references=refs)
    first_inliers = int(np.sum(_errors(coarse, pooled.dedup_by_landmark(), cam) < params.reproj_threshold_px))

    landmarks = observation_constraint_landmarks(index, get, coarse, params.constraint)
    second = match_landmarks(query, landmarks, params.ratio)
    if len(second):
        second = second.subset(_errors(coarse, second, cam) < params.second_pass_gate_px)
    second = second.dedup_by_landmark()
    if len(second) < MIN_MATCHES:
        return LocalizationResult(
            False,
            stage="constraint",
            reason=f"{len(second)} constrained matches",
            references=refs,
            first_pass_inliers=first_inliers,
            constraint_landmarks=len(landmarks),
        )
    try:
        pose = refine_pose(coarse, second, cam, params.huber_px)
        inl = _errors(pose, second, cam) < params.reproj_threshold_px
        if inl.sum() >= MIN_MATCHES and not inl.all():
            pose = refine_pose(pose, second.subset(inl), cam, params.huber_px)
            inl = _errors(pose, second, cam) < params.reproj_threshold_px
    except (TooFewMatches, NoConsensus) as exc:
        return LocalizationResult(False, stage="refinement", reason=str(exc), references=refs)
    count = int(inl.sum())
    if count < MIN_MATCHES:
        return LocalizationResult(False, stage="refinement", reason=f"{count} final inliers", references=refs)
    return LocalizationResult(
        True,
        pose=pose,
        inlier_count=count,
        references=refs,
        first_pass_inliers=first_inliers,
        constraint_landmarks=len(landmarks),
    )
