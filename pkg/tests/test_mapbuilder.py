import math
import struct

import numpy as np
import pytest

from vlsfusion.geometry import Pose, rot_to_quat
from vlsfusion.mapbuilder import (
    BehindCamera,
    DegenerateDirection,
    EmptyMap,
    FormatError,
    InsufficientParallax,
    all_landmarks,
    build_map,
    compute_cone,
    cone_contains,
    index_record_size,
    landmark_reprojection_ok,
    read_index,
    read_map,
    read_shard,
    triangulate_landmark,
    write_map,
)
from vlsfusion.worldsim import (
    CameraModel,
    NoiseSpec,
    World,
    generate_trajectory,
    generate_world,
    look_along,
    render_observations,
    render_trajectory,
)

CAM = CameraModel()


def cam_at(center, target):
    center = np.asarray(center, float)
    return Pose(rot_to_quat(look_along(np.asarray(target, float) - center)), center)


def project(pose, X):
    uv, _ = CAM.project(pose, np.atleast_2d(X))
    return uv[0]


# -- triangulation ----------------------------------------------------------


def test_triangulate_two_views_exact():
    X = np.array([10.0, 0.5, -0.3])
    poses = [cam_at([0, 0, 0], X), cam_at([0, 1, 0], X)]
    est = triangulate_landmark([(p, project(p, X)) for p in poses], CAM)
    assert np.linalg.norm(est - X) < 1e-6


def test_triangulate_zero_baseline():
    X = np.array([10.0, 0, 0])
    p = cam_at([0, 0, 0], X)
    with pytest.raises(InsufficientParallax):
        triangulate_landmark([(p, project(p, X)), (p, project(p, X))], CAM)


def test_triangulate_behind_camera():
    # pixels of a point behind both cameras: the rays only meet at negative depth
    X = np.array([-10.0, 0.5, 0.2])
    poses = [cam_at([0, 0, 0], [1, 0, 0]), cam_at([0, 1, 0], [1, 1, 0])]
    with pytest.raises(BehindCamera):
        triangulate_landmark([(p, project(p, X)) for p in poses], CAM)


def test_triangulate_noise_monte_carlo():
    rng = np.random.default_rng(0)
    errs = []
    for _ in range(50):
        X = np.array([10.0, rng.uniform(-1, 1), rng.uniform(-1, 1)])
        poses = [cam_at([0, y, 0], X) for y in np.linspace(-5, 5, 5)]
        obs = [(p, project(p, X) + rng.normal(0, 0.5, 2)) for p in poses]
        errs.append(np.linalg.norm(triangulate_landmark(obs, CAM) - X))
    assert np.percentile(errs, 95) < 0.05


# -- cones -------------------------------------------------------------------


def test_cone_single_camera():
    c = compute_cone(np.zeros(3), np.array([[0, 0, 5.0]]))
    assert c.L == 5.0 and c.theta == 0.0
    assert np.allclose(c.n, [0, 0, 1])


def test_cone_symmetric_pair():
    a = math.radians(45)
    C = 4 * np.array([[math.sin(a), 0, math.cos(a)], [-math.sin(a), 0, math.cos(a)]])
    c = compute_cone(np.zeros(3), C)
    assert np.allclose(c.n, [0, 0, 1])
    assert abs(c.theta - math.pi / 2) < 1e-12
    assert abs(c.L - 4) < 1e-12


def test_cone_antipodal():
    with pytest.raises(DegenerateDirection):
        compute_cone(np.zeros(3), np.array([[1.0, 0, 0], [-1.0, 0, 0]]))


def test_cone_contains_strict_and_margins():
    p = np.zeros((1, 3))
    n = np.array([[0, 0, 1.0]])
    assert not cone_contains(p, n, [0.2], [5.0], [0, 0, 5.0])[0]  # distance equals L
    assert cone_contains(p, n, [0.2], [5.0], [0, 0, 5.0], delta_L=0.1)[0]
    assert cone_contains(p, n, [0.2], [5.0], [0, 0, 4.0])[0]
    side = [math.sin(0.2), 0, math.cos(0.2)]
    assert not cone_contains(p, n, [0.2], [5.0], side)[0]  # 2 * 0.2 rad > 0.2 rad
    assert cone_contains(p, n, [0.2], [5.0], side, delta_theta=0.25)[0]


# -- build ---------------------------------------------------------------------


def two_frame_scene():
    rng = np.random.default_rng(4)
    pts = np.c_[rng.uniform(8, 12, 10), rng.uniform(-2, 2, 10), rng.uniform(-1, 1, 10)]
    world = World(np.arange(10, dtype=np.uint64) + 100, pts)
    poses = [cam_at([0, 0, 0], [1, 0, 0]), cam_at([0, 1.0, 0], [1, 1.0, 0])]
    frames = [render_observations(world, CAM, p, NoiseSpec(), seed=i, timestamp=i) for i, p in enumerate(poses)]
    return world, frames


def test_build_two_frames_noiseless():
    world, frames = two_frame_scene()
    index, shards = build_map(frames, CAM)
    lms = all_landmarks(shards)
    assert len(lms) == 10
    for lid, lm in lms.items():
        assert np.linalg.norm(lm.p3d - world.positions[lid - 100]) < 1e-6
    assert len(shards) == 2 == len(index)
    for f in frames:
        rows = [list(f.landmark_ids).index(lid) for lid in sorted(lms)]
        uv, _ = CAM.project(f.true_pose, np.stack([lms[lid].p3d for lid in sorted(lms)]))
        assert np.max(np.linalg.norm(uv - f.keypoints[rows], axis=1)) < 1e-6


def test_build_drops_single_view_landmarks():
    world, frames = two_frame_scene()
    extra = World(np.array([999], dtype=np.uint64), np.array([[10.0, 0.0, 0.0]]))
    f0 = render_observations(World(np.r_[world.ids, extra.ids], np.r_[world.positions, extra.positions]),
                             CAM, frames[0].true_pose, NoiseSpec(), seed=0)
    # descriptor dims must agree with the second frame
    index, shards = build_map([f0, frames[1]], CAM)
    assert 999 not in all_landmarks(shards)


def test_build_empty():
    world = World(np.array([1], dtype=np.uint64), np.array([[-10.0, 0, 0]]))
    frames = [render_observations(world, CAM, cam_at([0, y, 0], [1, y, 0]), NoiseSpec(), 0) for y in (0, 1)]
    with pytest.raises(EmptyMap):
        build_map(frames, CAM)


@pytest.fixture(scope="module")
def small_map():
    world = generate_world(1000, (25, 25, 4), 5)
    traj = generate_trajectory("circle", 120.0, 2.5, 1)
    frames = render_trajectory(world, CAM, traj, NoiseSpec(pixel_sigma=0.5, descriptor_sigma=0.05), 9)
    index, shards = build_map(frames, CAM)
    return frames, index, shards


def test_shard_count_oracle(small_map):
    frames, index, shards = small_map
    ids = set(all_landmarks(shards))
    want = sum(1 for f in frames if ids & set(f.landmark_ids.tolist()))
    assert len(shards) == want


def test_every_retained_landmark_reprojects(small_map):
    _, index, shards = small_map
    assert landmark_reprojection_ok(index, shards, CAM, 2.0)


def test_cone_soundness_over_map(small_map):
    _, index, shards = small_map
    for lid, lm in all_landmarks(shards).items():
        centers = np.stack([index.pose(v[0]).t for v in lm.views])
        ok = cone_contains(
            np.repeat(lm.p3d[None], len(centers), 0),
            np.repeat(lm.cone.n[None], len(centers), 0),
            np.full(len(centers), lm.cone.theta),
            np.full(len(centers), lm.cone.L),
            centers,
        )
        assert ok.all(), lid


# -- serialization ---------------------------------------------------------------


def test_roundtrip_bit_exact(small_map, tmp_path):
    _, index, shards = small_map
    write_map(index, shards, tmp_path)
    idx2, handles = read_map(tmp_path)
    assert idx2 == index
    for sh in shards:
        assert handles[sh.image_id].load() == sh


def test_index_file_size(small_map, tmp_path):
    _, index, shards = small_map
    write_map(index, shards, tmp_path)
    G = index.G
    want = 12 + sum(index_record_size(G, name) for name in index.shard_paths)
    assert (tmp_path / "map.idx").stat().st_size == want
    assert index_record_size(G, "") == 8 + 56 + 4 * G + 2


def test_shard_record_layout(small_map, tmp_path):
    _, index, shards = small_map
    write_map(index, shards, tmp_path)
    sh = shards[0]
    raw = (tmp_path / f"shard_{sh.image_id}.bin").read_bytes()
    magic, version, D, M = struct.unpack_from("<4sHHI", raw, 0)
    assert (magic, version, D, M) == (b"GFMS", 1, sh.D, len(sh))
    assert len(raw) == 12 + M * (8 + 24 + 12 + 4 + 4 + 8 + 4 * D)
    lid, x, y, z = struct.unpack_from("<Q3d", raw, 12)
    assert lid == int(sh.ids[0]) and np.array_equal([x, y, z], sh.p3d[0])


def test_corrupt_magic(small_map, tmp_path):
    _, index, shards = small_map
    write_map(index, shards, tmp_path)
    path = tmp_path / "map.idx"
    raw = bytearray(path.read_bytes())
    raw[0] ^= 0xFF
    path.write_bytes(bytes(raw))
    with pytest.raises(FormatError) as exc:
        read_index(path)
    assert exc.value.offset == 0


def test_truncated_shard(small_map, tmp_path):
    _, index, shards = small_map
    write_map(index, shards, tmp_path)
    path = tmp_path / f"shard_{shards[0].image_id}.bin"
    path.write_bytes(path.read_bytes()[:-3])
    with pytest.raises(FormatError):
        read_shard(path)


def test_bad_version(small_map, tmp_path):
    _, index, shards = small_map
    write_map(index, shards, tmp_path)
    path = tmp_path / "map.idx"
    raw = bytearray(path.read_bytes())
    raw[4:6] = struct.pack("<H", 99)
    path.write_bytes(bytes(raw))
    with pytest.raises(FormatError):
        read_index(path)


def test_read_map_missing(tmp_path):
    with pytest.raises(FileNotFoundError):
        read_map(tmp_path)
