import math

import numpy as np
import pytest
from hypothesis import given, settings

from conftest import poses, random_pose
from vlsfusion.geometry import (
    DegenerateConfiguration,
    NoAssociations,
    Pose,
    Trajectory,
    apply,
    associate,
    ate_rmse,
    compose,
    inverse,
    pose_accuracy_buckets,
    quat_from_rotvec,
    quat_mul,
    quat_vec,
    read_tum,
    rotation_angle_deg,
    umeyama_align,
    write_tum,
)

RZ90 = Pose.from_rotvec([0, 0, math.pi / 2])


def assert_pose_close(a, b, atol=1e-9):
    assert np.allclose(a.matrix(), b.matrix(), atol=atol), f"{a} != {b}"


# -- Pose ---------------------------------------------------------------------


def test_pose_is_normalized_and_canonical():
    p = Pose([-2.0, 0.0, 0.0, 0.0], [1, 2, 3])
    assert np.allclose(p.q, [1, 0, 0, 0])
    with pytest.raises(ValueError):
        p.q[0] = 3.0


def test_pose_rejects_zero_quaternion():
    with pytest.raises(ValueError):
        Pose([0, 0, 0, 0], [0, 0, 0])


@given(poses)
def test_pose_unit_norm_and_sign(p):
    assert abs(np.linalg.norm(p.q) - 1.0) < 1e-9
    assert p.q[0] >= 0.0


@given(poses)
def test_reconstruction_from_unit_quaternion_is_bit_exact(p):
    again = Pose(p.q, p.t)
    assert np.array_equal(again.q, p.q)


# -- compose / inverse / apply -----------------------------------------------


def test_compose_identity(rng):
    P = random_pose(rng)
    assert_pose_close(compose(Pose.identity(), P), P)
    assert_pose_close(compose(P, inverse(P)), Pose.identity())


def test_compose_rz90_pair_matches_matrix_product():
    a = Pose(RZ90.q, [1, 0, 0])
    got = compose(a, a)
    assert np.allclose(got.t, [1, 1, 0])
    assert abs(rotation_angle_deg(got.q) - 180.0) < 1e-9
    assert np.allclose(got.matrix(), a.matrix() @ a.matrix())


@given(poses, poses, poses)
@settings(max_examples=50)
def test_compose_associative(a, b, c):
    assert_pose_close(compose(compose(a, b), c), compose(a, compose(b, c)), atol=1e-8)


@given(poses, poses)
@settings(max_examples=50)
def test_inverse_of_product(a, b):
    assert_pose_close(inverse(compose(a, b)), compose(inverse(b), inverse(a)), atol=1e-8)


@given(poses)
def test_double_inverse(p):
    assert_pose_close(inverse(inverse(p)), p, atol=1e-8)


def test_inverse_examples():
    assert_pose_close(inverse(Pose.identity()), Pose.identity())
    assert np.allclose(inverse(Pose([1, 0, 0, 0], [1, 2, 3])).t, [-1, -2, -3])


def test_apply(rng):
    assert np.allclose(apply(Pose.identity(), [1, 2, 3]), [1, 2, 3])
    assert np.allclose(apply(RZ90, [1, 0, 0]), [0, 1, 0], atol=1e-12)
    P = random_pose(rng)
    x = rng.normal(size=3)
    assert np.allclose(apply(P, x), (P.matrix() @ np.r_[x, 1.0])[:3])


# -- angles ------------------------------------------------------------------


def test_rotation_angle_deg():
    assert rotation_angle_deg(Pose.identity().q) == 0.0
    assert abs(rotation_angle_deg(RZ90.q) - 90.0) < 1e-9
    assert rotation_angle_deg(-RZ90.q) == rotation_angle_deg(RZ90.q)


@given(poses)
def test_angle_of_q_times_inverse_is_zero(p):
    assert rotation_angle_deg(quat_mul(p.q, inverse(p).q)) < 1e-6


def test_quat_vec():
    assert np.allclose(quat_vec(Pose.identity().q), 0)
    assert np.allclose(quat_vec(RZ90.q), [0, 0, math.sin(math.pi / 4)])
    v = np.array([1e-4, -2e-4, 3e-4])
    assert np.allclose(quat_vec(quat_from_rotvec(v)), 0.5 * v, rtol=1e-7)
    assert np.allclose(quat_vec(-quat_from_rotvec(v)), 0.5 * v, rtol=1e-7)


# -- Umeyama ------------------------------------------------------------------


def test_umeyama_identity(rng):
    pts = rng.normal(size=(10, 3))
    assert_pose_close(umeyama_align(pts, pts), Pose.identity())


def test_umeyama_recovers_generator_on_100_instances(rng):
    worst_t = worst_r = 0.0
    for _ in range(100):
        T = random_pose(rng)
        src = rng.normal(scale=5.0, size=(10, 3))
        est = umeyama_align(src, apply(T, src))
        worst_t = max(worst_t, np.linalg.norm(est.t - T.t))
        worst_r = max(worst_r, math.radians(rotation_angle_deg(quat_mul(est.q, inverse(T).q))))
    assert worst_t <= 1e-9
    assert worst_r <= 1e-7


def test_umeyama_handles_reflection_case(rng):
    # planar points: the cross-covariance is rank 2 and the sign fix matters
    src = np.c_[rng.normal(size=(8, 2)), np.zeros(8)]
    T = Pose.from_rotvec([math.pi, 0, 0], [1, 2, 3])
    est = umeyama_align(src, apply(T, src))
    assert np.linalg.det(est.R) > 0
    assert_pose_close(est, T, atol=1e-9)


@pytest.mark.parametrize(
    "pts",
    [np.outer(np.arange(5.0), [1, 2, 3]), np.ones((4, 3)), np.zeros((2, 3))],
)
def test_umeyama_degenerate(pts):
    with pytest.raises(DegenerateConfiguration):
        umeyama_align(pts, pts)


# -- metrics ------------------------------------------------------------------


def circle_traj(n=50, shift=(0.0, 0.0, 0.0), dt=0.0):
    ts = np.arange(n) * 0.1 + dt
    poses = [Pose.from_rotvec([0, 0, a], [5 * math.cos(a), 5 * math.sin(a), 0.1 * a]) for a in np.linspace(0, 3, n)]
    return Trajectory(ts, tuple(Pose(p.q, p.t + np.asarray(shift)) for p in poses))


def test_trajectory_requires_increasing_timestamps():
    with pytest.raises(ValueError):
        Trajectory(np.array([0.0, 0.0]), (Pose.identity(), Pose.identity()))


def test_ate_examples():
    ref = circle_traj()
    assert ate_rmse(ref, ref) == 0.0
    shifted = circle_traj(shift=(1.0, 0, 0))
    assert abs(ate_rmse(shifted, ref, "none") - 1.0) < 1e-12
    assert ate_rmse(shifted, ref, "rigid6dof") < 1e-9


def test_ate_rigid_invariance(rng):
    ref = circle_traj()
    est = Trajectory(ref.timestamps, tuple(Pose(p.q, p.t + rng.normal(0, 0.1, 3)) for p in ref.poses))
    T = random_pose(rng)
    a = ate_rmse(est, ref, "rigid6dof")
    b = ate_rmse(est.transformed(T), ref.transformed(T), "rigid6dof")
    assert abs(a - b) < 1e-9


def test_association_window():
    ref = circle_traj()
    assert ate_rmse(circle_traj(dt=0.009), ref) < 1.0
    with pytest.raises(NoAssociations):
        ate_rmse(circle_traj(dt=0.05), ref)
    i_est, i_ref = associate(np.array([0.0, 0.004, 0.1]), np.array([0.0, 0.1]))
    assert list(i_ref) == [0, 1]  # each reference frame used once


def test_buckets():
    ref = circle_traj()
    assert pose_accuracy_buckets(ref, ref, [(0.25, 2), (0.5, 5)]) == [100.0, 100.0]
    one_ref = Trajectory(ref.timestamps[:2], ref.poses[:2])
    off = quat_from_rotvec([0, 0, math.radians(1)])
    one_est = Trajectory(one_ref.timestamps, tuple(Pose(quat_mul(p.q, off), p.t + [0.3, 0, 0]) for p in one_ref.poses))
    assert pose_accuracy_buckets(one_est, one_ref, [(0.25, 2), (0.5, 5)]) == [0.0, 100.0]


def test_buckets_match_brute_force(rng):
    ref = circle_traj(40)
    terr = rng.uniform(0, 1, 40)
    rerr = rng.uniform(0, 8, 40)
    est = []
    for p, te, re in zip(ref.poses, terr, rerr):
        d = rng.normal(size=3)
        est.append(Pose(quat_mul(p.q, quat_from_rotvec([0, 0, math.radians(re)])), p.t + te * d / np.linalg.norm(d)))
    est = Trajectory(ref.timestamps, tuple(est))
    th = [(0.25, 2), (0.5, 5), (5, 10)]
    want = [100.0 * sum(1 for a, b in zip(terr, rerr) if a < d and b < r) / 40 for d, r in th]
    assert np.allclose(pose_accuracy_buckets(est, ref, th), want)


def test_tum_roundtrip(tmp_path):
    ref = circle_traj()
    write_tum(ref, tmp_path / "t.tum")
    first = (tmp_path / "t.tum").read_text().splitlines()[0].split()
    assert len(first) == 8
    back = read_tum(tmp_path / "t.tum")
    assert np.allclose(back.timestamps, ref.timestamps)
    assert np.allclose(back.positions(), ref.positions(), atol=1e-7)
    assert np.allclose(back.quaternions(), ref.quaternions(), atol=1e-8)
