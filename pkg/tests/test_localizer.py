import math
from concurrent.futures import ThreadPoolExecutor

import numpy as np
import pytest
from sklearn.cluster import DBSCAN

from vlsfusion.geometry import Pose, compose, inverse, quat_from_rotvec, quat_to_rotvec, rotation_angle
from vlsfusion.localizer import (
    ConstraintParams,
    Matches,
    NoConsensus,
    QueryFeatures,
    RetrievalParams,
    TooFewMatches,
    _errors,
    dbscan_labels,
    dbscan_poses,
    knn_match,
    localize,
    observation_constraint_landmarks,
    pnp_ransac,
    pose_distance_matrix,
    refine_pose,
    retrieve_references,
)
from vlsfusion.mapbuilder import MapIndex, MapShard, all_landmarks, build_map, cone_contains
from vlsfusion.worldsim import (
    CameraModel,
    NoiseSpec,
    generate_trajectory,
    generate_world,
    render_observations,
    render_trajectory,
)

from conftest import random_pose

CAM = CameraModel()


def features(frame) -> QueryFeatures:
    return QueryFeatures(frame.keypoints, frame.local_descriptors, frame.global_descriptor)


def pose_err(a: Pose, b: Pose) -> tuple[float, float]:
    return float(np.linalg.norm(a.t - b.t)), rotation_angle(compose(inverse(a), b).q)


def interpolate_pose(a: Pose, b: Pose, s: float) -> Pose:
    rel = compose(inverse(a), b)
    step = Pose(quat_from_rotvec(s * quat_to_rotvec(rel.q)), np.zeros(3))
    return Pose(compose(a, step).q, (1 - s) * a.t + s * b.t)


def perturbed(rng, center: Pose, s: float) -> Pose:
    return compose(center, Pose(quat_from_rotvec(rng.normal(0, 0.1 * s, 3)), rng.normal(0, s, 3)))


@pytest.fixture(scope="module")
def scene():
    world = generate_world(1000, (25, 25, 4), 5)
    traj = generate_trajectory("circle", 120.0, 2.5, 1)
    clean = render_trajectory(world, CAM, traj, NoiseSpec(), 9)
    index, shards = build_map(clean, CAM)
    return world, traj, clean, index, {s.image_id: s for s in shards}


# -- retrieval ---------------------------------------------------------------


def naive_retrieve(index, g, prior, p):
    """The six retrieval steps executed literally."""
    scores = []
    for r in range(len(index)):
        a = index.global_descriptors[r].astype(float)
        scores.append(float(a @ g) / (np.linalg.norm(a) * np.linalg.norm(g)))
    ranked = sorted(range(len(index)), key=lambda r: (-scores[r], r))
    top = ranked[: p.overfetch_factor * p.k]
    if prior is not None:
        kept = [r for r in top if np.linalg.norm(index.positions[r] - prior.t) < p.prior_radius]
        for r in top:
            if len(kept) >= p.k:
                break
            if r not in kept:
                kept.append(r)
        top = [r for r in top if r in kept]
    out = []
    for r in top:
        if all(np.linalg.norm(index.positions[r] - index.positions[s]) >= p.nms_radius for s in out):
            out.append(r)
    return [int(index.image_ids[r]) for r in out[: p.k]]


def random_index(rng, n, G=8):
    q = rng.normal(size=(n, 4))
    return MapIndex(
        image_ids=rng.permutation(10 * n)[:n].astype(np.uint64),
        positions=rng.uniform(0, 30, size=(n, 3)),
        quaternions=q / np.linalg.norm(q, axis=1, keepdims=True),
        global_descriptors=rng.normal(size=(n, G)).astype(np.float32),
        shard_paths=[f"{i}.shard" for i in range(n)],
    )


def test_retrieval_matches_naive_oracle(rng):
    for trial in range(200):
        n = int(rng.integers(1, 60))
        index = random_index(rng, n)
        p = RetrievalParams(
            k=int(rng.integers(1, 6)),
            overfetch_factor=int(rng.integers(1, 11)),
            prior_radius=float(rng.uniform(0, 20)),
            nms_radius=float(rng.uniform(0, 5)),
        )
        prior = random_pose(rng, 10.0) if trial % 3 else None
        g = rng.normal(size=8)
        got, short = retrieve_references(index, g, prior, p)
        assert got == naive_retrieve(index, g, prior, p)
        assert short == (len(got) < p.k)


def test_retrieval_prior_at_mapping_pose(scene):
    _, _, clean, index, _ = scene
    for i in (3, 20, 41):
        f = clean[i]
        got, _ = retrieve_references(index, f.global_descriptor, f.true_pose, RetrievalParams(k=1))
        dist = np.linalg.norm(index.positions - f.true_pose.t, axis=1)
        assert got == [int(index.image_ids[np.argmin(dist)])]


def test_retrieval_fill_when_prior_far(rng):
    index = random_index(rng, 40)
    far = Pose(np.array([1.0, 0, 0, 0]), np.array([1e4, 1e4, 1e4]))
    got, short = retrieve_references(index, rng.normal(size=8), far, RetrievalParams(k=3, nms_radius=0.0))
    assert len(got) == 3 and not short


def test_retrieval_empty_index(rng):
    empty = MapIndex(np.zeros(0, np.uint64), np.zeros((0, 3)), np.zeros((0, 4)), np.zeros((0, 8), np.float32), [])
    with pytest.raises(ValueError):
        retrieve_references(empty, np.ones(8), None, RetrievalParams())


# -- matching ----------------------------------------------------------------


def one_landmark_shard(D=4):
    return MapShard(
        image_id=1,
        ids=np.array([42], np.uint64),
        p3d=np.zeros((1, 3)),
        n=np.array([[1, 0, 0]], np.float32),
        theta=np.array([0.1], np.float32),
        L=np.array([5.0], np.float32),
        obs2d=np.zeros((1, 2), np.float32),
        descriptors=np.ones((1, D), np.float32),
    )


def test_knn_single_landmark_passes():
    q = QueryFeatures(np.zeros((1, 2)), np.full((1, 4), 0.9, np.float32), np.ones(3, np.float32))
    m = knn_match(q, one_landmark_shard(), 0.85)
    assert len(m) == 1 and int(m.landmark_ids[0]) == 42


def test_knn_noiseless_ids_correct(scene):
    world, _, clean, _, shards = scene
    # query rendered noiselessly at a pose between mapping frames
    pose = interpolate_pose(clean[10].true_pose, clean[11].true_pose, 0.5)
    qf = render_observations(world, CAM, pose, NoiseSpec(), 77)
    total = 0
    for image_id, sh in list(shards.items())[:15]:
        m = knn_match(features(qf), sh, 0.85)
        truth = qf.landmark_ids[m.query_idx]
        assert np.array_equal(truth, m.landmark_ids)
        total += len(m)
    assert total > 0


def test_knn_precision_degrades_with_descriptor_noise(scene):
    world, _, clean, index, shards = scene
    sh = shards[int(index.image_ids[10])]
    pose = clean[10].true_pose
    precision = []
    for sigma in (0.0, 0.1, 0.2, 0.4):
        good = tot = 0
        for s in range(20):
            qf = render_observations(world, CAM, pose, NoiseSpec(descriptor_sigma=sigma), 1000 + s)
            m = knn_match(features(qf), sh, 1.0)
            good += int(np.sum(qf.landmark_ids[m.query_idx] == m.landmark_ids))
            tot += len(m)
        precision.append(good / tot)
    assert precision[0] == 1.0
    assert all(b <= a for a, b in zip(precision, precision[1:]))
    assert precision[-1] < precision[0]


# -- PnP ---------------------------------------------------------------------


def synthetic_matches(rng, pose, n, n_out=0, pixel_sigma=0.0):
    depth = rng.uniform(4, 15, size=n)
    uv = np.stack([rng.uniform(20, 620, n), rng.uniform(20, 460, n)], axis=1)
    rays = np.stack([(uv[:, 0] - CAM.cx) / CAM.fx, (uv[:, 1] - CAM.cy) / CAM.fy, np.ones(n)], axis=1)
    pts = (rays * depth[:, None]) @ pose.R.T + pose.t
    pix = uv + rng.normal(0, pixel_sigma, uv.shape) if pixel_sigma else uv.copy()
    if n_out:
        pts[-n_out:] = rng.uniform(-20, 20, size=(n_out, 3)) + pose.t
    return Matches(
        np.arange(n, dtype=np.int64),
        np.arange(n, dtype=np.uint64),
        pts,
        pix,
        np.zeros(n),
    )


def test_pnp_noiseless(rng):
    for _ in range(10):
        pose = random_pose(rng, 5.0)
        m = synthetic_matches(rng, pose, 20)
        est, mask = pnp_ransac(m, CAM, seed=1)
        dt, dr = pose_err(est, pose)
        assert dt < 1e-6 and dr < 1e-6
        assert mask.all()


def test_pnp_with_outliers(rng):
    for trial in range(10):
        pose = random_pose(rng, 5.0)
        m = synthetic_matches(rng, pose, 20, n_out=8)
        est, mask = pnp_ransac(m, CAM, seed=trial)
        dt, dr = pose_err(est, pose)
        assert dt < 1e-6 and dr < 1e-6
        assert mask[:12].all()
        # constructed outliers may land near their pixel by chance; those that do are true inliers
        assert np.all(_errors(est, m.subset(mask), CAM) < 3.0)


def test_pnp_inliers_within_threshold(rng):
    for trial in range(10):
        pose = random_pose(rng, 5.0)
        m = synthetic_matches(rng, pose, 40, n_out=10, pixel_sigma=1.0)
        est, mask = pnp_ransac(m, CAM, reproj_threshold_px=3.0, seed=trial)
        assert np.all(_errors(est, m, CAM)[mask] < 3.0)
        assert np.all(_errors(est, m, CAM)[~mask] >= 3.0)


def test_pnp_too_few(rng):
    m = synthetic_matches(rng, Pose.identity(), 5)
    with pytest.raises(TooFewMatches):
        pnp_ransac(m, CAM)


def test_pnp_no_consensus(rng):
    m = synthetic_matches(rng, Pose.identity(), 30)
    m.p3d[:] = rng.uniform(-20, 20, size=m.p3d.shape) + np.array([0, 0, 30])
    with pytest.raises(NoConsensus):
        pnp_ransac(m, CAM, seed=3)


def test_pnp_deterministic(rng):
    pose = random_pose(rng, 5.0)
    m = synthetic_matches(rng, pose, 40, n_out=15, pixel_sigma=0.5)
    a = pnp_ransac(m, CAM, seed=[5, 9])
    b = pnp_ransac(m, CAM, seed=[5, 9])
    assert np.array_equal(a[0].q, b[0].q) and np.array_equal(a[0].t, b[0].t)
    assert np.array_equal(a[1], b[1])


# -- DBSCAN ------------------------------------------------------------------


def brute_dbscan(dist, eps, min_pts):
    """Core points, and the partition of core points into connected components."""
    n = len(dist)
    core = (dist <= eps).sum(axis=1) >= min_pts
    comp = -np.ones(n, int)
    c = 0
    for i in range(n):
        if core[i] and comp[i] < 0:
            stack = [i]
            comp[i] = c
            while stack:
                j = stack.pop()
                for k in np.nonzero((dist[j] <= eps) & core & (comp < 0))[0]:
                    comp[k] = c
                    stack.append(k)
            c += 1
    return core, comp


def same_partition(a, b, mask):
    pairs = {}
    for x, y in zip(a[mask], b[mask]):
        if pairs.setdefault(x, y) != y:
            return False
    return len(set(pairs.values())) == len(pairs)


def test_dbscan_against_oracles(rng):
    for _ in range(200):
        n = int(rng.integers(1, 51))
        centers = [random_pose(rng, 5.0) for _ in range(int(rng.integers(1, 4)))]
        poses = [
            perturbed(rng, centers[int(rng.integers(len(centers)))], float(rng.choice([0.05, 0.3, 3.0])))
            for _ in range(n)
        ]
        eps = float(rng.uniform(0.1, 1.0))
        min_pts = int(rng.integers(1, 5))
        dist = pose_distance_matrix(poses, 1.0)
        labels = dbscan_labels(dist, eps, min_pts)
        core, comp = brute_dbscan(dist, eps, min_pts)
        sk = DBSCAN(eps=eps, min_samples=min_pts, metric="precomputed").fit(dist).labels_
        # noise set is unique; core points partition is unique
        noise_oracle = np.array([not core[i] and not np.any(core & (dist[i] <= eps)) for i in range(n)])
        assert np.array_equal(labels < 0, noise_oracle)
        assert np.array_equal(sk < 0, noise_oracle)
        assert same_partition(labels, comp, core)
        # border points join a cluster of one of their core neighbours
        for i in np.nonzero(~core & (labels >= 0))[0]:
            nb = np.nonzero(core & (dist[i] <= eps))[0]
            assert labels[i] in set(labels[nb])


def test_dbscan_examples():
    p = Pose(np.array([1.0, 0, 0, 0]), np.array([1.0, 2.0, 3.0]))
    assert dbscan_poses([p] * 5, eps=0.1, min_pts=2) == [0, 1, 2, 3, 4]
    near = [Pose(p.q, p.t + np.array([0.01 * i, 0, 0])) for i in range(4)]
    far = Pose(p.q, p.t + np.array([10.0, 0, 0]))
    assert dbscan_poses(near + [far], eps=0.1, min_pts=2) == [0, 1, 2, 3]
    spread = [Pose(p.q, p.t + np.array([10.0 * i, 0, 0])) for i in range(5)]
    assert dbscan_poses(spread, eps=0.1, min_pts=2) == []


def test_dbscan_tie_breaks_by_weight():
    a = Pose(np.array([1.0, 0, 0, 0]), np.zeros(3))
    b = Pose(np.array([1.0, 0, 0, 0]), np.array([20.0, 0, 0]))
    members = dbscan_poses([a, a, b, b], eps=0.1, min_pts=2, weights=[1, 1, 5, 5])
    assert members == [2, 3]


# -- refinement --------------------------------------------------------------


def test_refine_at_truth_is_fixed_point(rng):
    pose = random_pose(rng, 5.0)
    m = synthetic_matches(rng, pose, 30)
    out = refine_pose(pose, m, CAM)
    dt, dr = pose_err(out, pose)
    assert dt < 1e-9 and dr < 1e-9


def test_refine_basin(rng):
    for _ in range(10):
        pose = random_pose(rng, 5.0)
        m = synthetic_matches(rng, pose, 30)
        axis = rng.normal(size=3)
        axis /= np.linalg.norm(axis)
        step = rng.normal(size=3)
        step *= 0.2 / np.linalg.norm(step)
        coarse = Pose(compose(pose, Pose(quat_from_rotvec(math.radians(2.0) * axis), np.zeros(3))).q, pose.t + step)
        trace = []
        out = refine_pose(coarse, m, CAM, trace=trace)
        dt, dr = pose_err(out, pose)
        assert dt < 1e-6 and dr < 1e-6
        assert all(b <= a for a, b in zip(trace, trace[1:]))


def test_refine_dedups_by_landmark(rng):
    pose = random_pose(rng, 5.0)
    m = synthetic_matches(rng, pose, 8)
    dup = m.subset(np.array([0, 1]))
    dup.distances = np.array([5.0, 5.0])
    dup.pixels = dup.pixels + 40.0  # bad copies with worse descriptor distance
    both = Matches.concat([m, dup])
    assert len(both.dedup_by_landmark()) == 8
    kept = both.dedup_by_landmark()
    assert np.all(kept.distances == 0.0)
    dt, _ = pose_err(refine_pose(pose, both, CAM), pose)
    assert dt < 1e-9


def test_refine_too_few(rng):
    m = synthetic_matches(rng, Pose.identity(), 10)
    m.landmark_ids[:] = np.array([0, 1, 2, 3, 4, 0, 1, 2, 3, 4], dtype=np.uint64)
    with pytest.raises(TooFewMatches):
        refine_pose(Pose.identity(), m, CAM)


# -- observation constraints -------------------------------------------------


def test_constraint_contains_mapping_camera_landmarks(scene):
    _, _, _, index, shards = scene
    zero = ConstraintParams(0.0, 0.0, 1.0, math.radians(1.0))
    for image_id in list(shards)[::7]:
        got = {lm.id for lm in observation_constraint_landmarks(index, shards, index.pose(image_id), zero)}
        assert set(shards[image_id].ids.tolist()) <= got


def test_constraint_equals_bruteforce(scene):
    _, _, clean, index, shards = scene
    everything = ConstraintParams(0.5, math.radians(5.0), math.inf, math.pi + 0.1)
    lms = all_landmarks(list(shards.values()))
    ids = np.array(sorted(lms))
    p3d = np.stack([lms[i].p3d for i in ids])
    n = np.stack([lms[i].cone.n for i in ids])
    theta = np.array([lms[i].cone.theta for i in ids])
    L = np.array([lms[i].cone.L for i in ids])
    for f in clean[::9]:
        coarse = Pose(f.true_pose.q, f.true_pose.t + np.array([0.3, -0.2, 0.1]))
        got = [lm.id for lm in observation_constraint_landmarks(index, shards, coarse, everything)]
        want = ids[cone_contains(p3d, n, theta, L, coarse.t, 0.5, math.radians(5.0))]
        assert got == want.tolist()


def test_constraint_excludes_cone_pointing_away():
    index = MapIndex(
        np.array([1], np.uint64), np.zeros((1, 3)), np.array([[1.0, 0, 0, 0]]), np.ones((1, 4), np.float32), ["x"]
    )
    shard = MapShard(
        1,
        np.array([10, 11], np.uint64),
        np.array([[0.0, 0, 5], [0.0, 0, 5]]),
        np.array([[0, 0, -1], [0, 0, 1]], np.float32),  # toward the camera, away from it
        np.array([0.3, 0.3], np.float32),
        np.array([10.0, 10.0], np.float32),
        np.zeros((2, 2), np.float32),
        np.eye(2, 4, dtype=np.float32),
    )
    got = observation_constraint_landmarks(index, {1: shard}, Pose.identity(), ConstraintParams())
    assert [lm.id for lm in got] == [10]


# -- full pipeline -----------------------------------------------------------


def test_localize_at_mapping_pose_noiseless(scene):
    _, _, clean, index, shards = scene
    for i in (5, 30, 50):
        res = localize(index, shards, features(clean[i]), CAM, prior=clean[i].true_pose, seed=i)
        assert res.ok, res.reason
        dt, _ = pose_err(res.pose, clean[i].true_pose)
        assert dt < 1e-4
        assert res.inlier_count >= res.first_pass_inliers


def test_localize_between_frames_noisy():
    world = generate_world(1000, (25, 25, 4), 5)
    traj = generate_trajectory("circle", 120.0, 2.5, 1)
    noise = NoiseSpec(pixel_sigma=0.5, descriptor_sigma=0.05)
    frames = render_trajectory(world, CAM, traj, noise, 9)
    index, shard_list = build_map(frames, CAM)
    shards = {s.image_id: s for s in shard_list}
    errs = []
    for i in range(2, 58, 4):
        pose = interpolate_pose(frames[i].true_pose, frames[i + 1].true_pose, 0.5)
        qf = render_observations(world, CAM, pose, noise, 500 + i)
        res = localize(index, shards, features(qf), CAM, prior=pose, seed=i)
        assert res.ok, res.reason
        errs.append(pose_err(res.pose, pose)[0])
    assert np.median(errs) < 0.05


def test_localize_no_covisible(scene):
    world, _, _, index, shards = scene
    away = Pose(np.array([1.0, 0, 0, 0]), np.array([500.0, 500.0, 500.0]))
    qf = render_observations(world, CAM, away, NoiseSpec(), 1)
    assert len(qf) == 0
    res = localize(index, shards, features(qf), CAM)
    assert not res.ok and res.stage in ("retrieval", "matching")


def test_localize_deterministic_across_schedules(scene):
    world, _, clean, index, shards = scene
    pose = interpolate_pose(clean[12].true_pose, clean[13].true_pose, 0.3)
    qf = render_observations(world, CAM, pose, NoiseSpec(pixel_sigma=0.5, descriptor_sigma=0.05), 3)
    serial = localize(index, shards, features(qf), CAM, prior=pose, seed=17)
    with ThreadPoolExecutor(4) as ex:
        parallel = localize(index, shards, features(qf), CAM, prior=pose, seed=17, executor=ex)
    assert serial.ok and parallel.ok
    assert np.array_equal(serial.pose.q, parallel.pose.q) and np.array_equal(serial.pose.t, parallel.pose.t)
    assert serial.inlier_count == parallel.inlier_count
