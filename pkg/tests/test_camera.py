import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from triadapt.camera import (CameraConfig, CameraPose, PosePrior, clamp_to_prior, generate_rays,
                             extrinsics_to_pose, pose_to_extrinsics, rays_for_angles, sample_pose_prior,
                             sample_poses)

yaws = st.floats(-math.pi + 1e-3, math.pi - 1e-3)
pitches = st.floats(-math.pi / 2 + 1e-3, math.pi / 2 - 1e-3)


def test_frontal_extrinsics():
    m = pose_to_extrinsics(CameraPose(0.0, 0.0, 2.7))
    np.testing.assert_allclose(m[:3, 3], [0, 0, 2.7], atol=1e-12)
    np.testing.assert_allclose(-m[:3, 2], [0, 0, -1], atol=1e-12)
    np.testing.assert_allclose(m[:3, :3], np.eye(3), atol=1e-12)


def test_side_extrinsics():
    m = pose_to_extrinsics(CameraPose(math.pi / 2, 0.0, 2.7))
    np.testing.assert_allclose(m[:3, 3], [2.7, 0, 0], atol=1e-12)


@given(yaws, pitches)
def test_rotation_orthonormal_and_looks_at_origin(yaw, pitch):
    m = pose_to_extrinsics(CameraPose(yaw, pitch))
    rot, center = m[:3, :3], m[:3, 3]
    np.testing.assert_allclose(rot.T @ rot, np.eye(3), atol=1e-6)
    assert np.linalg.det(rot) > 0
    np.testing.assert_allclose(-rot[:, 2], -center / np.linalg.norm(center), atol=1e-9)
    assert abs(rot[1, 0]) < 1e-12  # no roll: camera x axis stays horizontal


@given(yaws, pitches, st.floats(0.5, 10.0))
def test_pose_extrinsics_round_trip(yaw, pitch, radius):
    pose = CameraPose(yaw, pitch, radius)
    back = extrinsics_to_pose(pose_to_extrinsics(pose))
    assert back.yaw == pytest.approx(yaw, abs=1e-6)
    assert back.pitch == pytest.approx(pitch, abs=1e-6)
    assert back.radius == pytest.approx(radius, abs=1e-9)


def test_round_trip_example():
    back = extrinsics_to_pose(pose_to_extrinsics(CameraPose(0.3, -0.1)))
    assert (back.yaw, back.pitch) == pytest.approx((0.3, -0.1), abs=1e-6)


def test_identity_rotation_at_z_axis():
    m = np.eye(4)
    m[2, 3] = 2.7
    pose = extrinsics_to_pose(m)
    assert (pose.yaw, pose.pitch) == pytest.approx((0.0, 0.0), abs=1e-12)


def test_non_look_at_rejected():
    m = pose_to_extrinsics(CameraPose(0.2, 0.1))
    m[:3, 3] += [0.3, 0.0, 0.0]
    with pytest.raises(ValueError, match="look at the origin"):
        extrinsics_to_pose(m)
    rolled = pose_to_extrinsics(CameraPose(0.0, 0.0))
    c, s = math.cos(0.2), math.sin(0.2)
    rolled[:3, :3] = rolled[:3, :3] @ np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]])
    with pytest.raises(ValueError, match="roll"):
        extrinsics_to_pose(rolled)
    with pytest.raises(ValueError):
        extrinsics_to_pose(np.diag([1.0, 1.0, -1.0, 1.0]))


def test_pose_validation():
    with pytest.raises(ValueError):
        CameraPose(4.0, 0.0)
    with pytest.raises(ValueError):
        CameraPose(0.0, 2.0)
    with pytest.raises(ValueError):
        CameraPose(0.0, 0.0, radius=0.0)


def test_principal_ray_and_origin_hit():
    rays = generate_rays(CameraPose(0.0, 0.0), (5, 5))
    np.testing.assert_allclose(rays.directions[2, 2], [0, 0, -1], atol=1e-12)
    point = rays.origins[2, 2] + 2.7 * rays.directions[2, 2]
    np.testing.assert_allclose(point, 0.0, atol=1e-6)
    assert rays.near < rays.far
    assert np.all(rays.origins == rays.origins[0, 0])


@settings(max_examples=30)
@given(yaws, pitches, st.integers(1, 12), st.integers(1, 12))
def test_directions_unit_norm(yaw, pitch, h, w):
    rays = generate_rays(CameraPose(yaw, pitch), (h, w))
    np.testing.assert_allclose(np.linalg.norm(rays.directions, axis=-1), 1.0, atol=1e-6)


@settings(max_examples=30)
@given(st.floats(-0.5, 0.5), st.floats(-0.3, 0.3))
def test_origin_projects_to_principal_point(yaw, pitch):
    # odd resolution: the central pixel ray passes through the world origin
    rays = generate_rays(CameraPose(yaw, pitch), (7, 7))
    o, d = rays.origins[3, 3], rays.directions[3, 3]
    closest = o - np.dot(o, d) * d
    np.testing.assert_allclose(closest, 0.0, atol=1e-9)


def test_batched_rays_match_single():
    cam = CameraConfig()
    yaw = torch.tensor([0.2, -0.4], dtype=torch.float64)
    pitch = torch.tensor([0.1, 0.25], dtype=torch.float64)
    origins, dirs = rays_for_angles(yaw, pitch, 4, 6, cam)
    for i in range(2):
        rays = generate_rays(cam.pose(float(yaw[i]), float(pitch[i])), (4, 6), cam)
        np.testing.assert_allclose(dirs[i].numpy(), rays.directions, atol=1e-12)
        np.testing.assert_allclose(origins[i].numpy(), rays.origins[0, 0], atol=1e-12)


def test_focal_uses_horizontal_fov():
    cam = CameraConfig(fov=math.radians(90))
    assert cam.focal(32) == pytest.approx(16.0)


def test_near_far_contain_unit_cube():
    cam = CameraConfig()
    corners = np.array([[x, y, z] for x in (-1, 1) for y in (-1, 1) for z in (-1, 1)], float)
    for yaw, pitch in [(0.0, 0.0), (0.5, 0.3), (-0.5, -0.3)]:
        center = pose_to_extrinsics(cam.pose(yaw, pitch))[:3, 3]
        dist = np.linalg.norm(corners - center, axis=1)
        assert dist.min() >= cam.near and dist.max() <= cam.far


def test_prior_samples_bounds_and_determinism():
    prior = PosePrior()
    a = sample_poses(np.random.default_rng(1), 10_000, prior)
    b = sample_poses(np.random.default_rng(1), 10_000, prior)
    np.testing.assert_array_equal(a, b)
    assert np.all(a >= prior.low) and np.all(a <= prior.high)
    p1 = sample_pose_prior(np.random.default_rng(3), prior)
    p2 = sample_pose_prior(np.random.default_rng(3), prior)
    assert p1 == p2 and -0.5 <= p1.yaw <= 0.5 and -0.3 <= p1.pitch <= 0.3


def test_prior_yaw_mean_monte_carlo():
    # oracle: mean 0, standard error sqrt(var / n) with var = (b - a)^2 / 12
    n = 100_000
    yaw = sample_poses(np.random.default_rng(7), n)[:, 0]
    se = math.sqrt(1.0 / 12.0 / n)
    assert abs(yaw.mean()) < 3 * se


def test_clamp_to_prior():
    prior = PosePrior()
    out = clamp_to_prior(torch.tensor([[1.0, -1.0], [0.1, 0.2]]), prior)
    np.testing.assert_allclose(out.numpy(), [[0.5, -0.3], [0.1, 0.2]], atol=1e-7)
