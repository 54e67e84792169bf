"""Look-at-origin camera model on a fixed-radius sphere.

A pose is two angles (yaw, pitch). The camera sits at
``radius * (sin yaw cos pitch, sin pitch, cos yaw cos pitch)`` and looks at
the world origin with +y up. Camera frame follows the OpenGL convention:
the camera looks down its local -z axis, +x right, +y up.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch

DEFAULT_RADIUS = 2.7
DEFAULT_FOV = math.radians(30.0)
_SQRT3 = math.sqrt(3.0)


@dataclass(frozen=True)
class CameraPose:
    yaw: float
    pitch: float
    radius: float = DEFAULT_RADIUS
    fov: float = DEFAULT_FOV

    def __post_init__(self):
        if not (-math.pi <= self.yaw <= math.pi):
            raise ValueError(f"yaw {self.yaw} outside [-pi, pi]")
        if not (-math.pi / 2 <= self.pitch <= math.pi / 2):
            raise ValueError(f"pitch {self.pitch} outside [-pi/2, pi/2]")
        if self.radius <= 0:
            raise ValueError("radius must be positive")
        if not (0 < self.fov < math.pi):
            raise ValueError("fov must lie in (0, pi)")

    def as_array(self) -> np.ndarray:
        return np.array([self.yaw, self.pitch])


@dataclass(frozen=True)
class PosePrior:
    """Uniform box prior over (yaw, pitch)."""

    yaw_range: tuple[float, float] = (-0.5, 0.5)
    pitch_range: tuple[float, float] = (-0.3, 0.3)

    def __post_init__(self):
        for lo, hi in (self.yaw_range, self.pitch_range):
            if not lo <= hi:
                raise ValueError("prior ranges must satisfy lo <= hi")

    @property
    def low(self) -> np.ndarray:
        return np.array([self.yaw_range[0], self.pitch_range[0]])

    @property
    def high(self) -> np.ndarray:
        return np.array([self.yaw_range[1], self.pitch_range[1]])

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.low + self.high)

    @property
    def variance(self) -> np.ndarray:
        """Per-angle variance of the uniform prior, (hi - lo)^2 / 12."""
        return (self.high - self.low) ** 2 / 12.0


@dataclass(frozen=True)
class CameraConfig:
    """Fixed intrinsics and sampling interval shared by every pose.

    ``near``/``far`` default to the tightest interval containing the whole
    ``[-extent, extent]^3`` cube from any camera on the sphere.
    """

    radius: float = DEFAULT_RADIUS
    fov: float = DEFAULT_FOV
    extent: float = 1.0
    near: float | None = None
    far: float | None = None
    prior: PosePrior = field(default_factory=PosePrior)

    def __post_init__(self):
        if self.near is None:
            object.__setattr__(self, "near", max(self.radius - _SQRT3 * self.extent, 1e-3))
        if self.far is None:
            object.__setattr__(self, "far", self.radius + _SQRT3 * self.extent)
        if not 0 < self.near < self.far:
            raise ValueError(f"need 0 < near < far, got near={self.near} far={self.far}")

    def pose(self, yaw: float, pitch: float) -> CameraPose:
        return CameraPose(yaw, pitch, self.radius, self.fov)

    def focal(self, width: int) -> float:
        """Focal length in pixels; ``fov`` is the horizontal field of view."""
        return 0.5 * width / math.tan(0.5 * self.fov)


@dataclass(frozen=True)
class RayBundle:
    origins: np.ndarray  # H x W x 3
    directions: np.ndarray  # H x W x 3, unit norm
    near: float
    far: float


def _rotation(yaw, pitch, xp):
    """Columns are the camera x, y, z axes in world coordinates."""
    sy, cy = xp.sin(yaw), xp.cos(yaw)
    sp, cp = xp.sin(pitch), xp.cos(pitch)
    zero = xp.zeros_like(sy)
    z_axis = xp.stack([sy * cp, sp, cy * cp], -1)
    # normalize((0, 1, 0) x z_axis) in closed form; stays defined at the poles
    x_axis = xp.stack([cy, zero, -sy], -1)
    y_axis = xp.stack([-sy * sp, cp, -cy * sp], -1)
    return xp.stack([x_axis, y_axis, z_axis], -1)


def pose_to_extrinsics(pose: CameraPose) -> np.ndarray:
    """4x4 camera-to-world matrix for a look-at-origin camera."""
    rot = _rotation(np.asarray(pose.yaw, float), np.asarray(pose.pitch, float), np)
    mat = np.eye(4)
    mat[:3, :3] = rot
    mat[:3, 3] = pose.radius * rot[:, 2]
    return mat


def extrinsics_to_pose(extrinsics, fov: float = DEFAULT_FOV, atol: float = 1e-6) -> CameraPose:
    """Recover (yaw, pitch, radius) from a look-at-origin camera-to-world matrix.

    Raises ``ValueError`` when the rotation is not orthonormal, the camera has
    roll, or the origin does not lie on the camera's -z ray.
    """
    mat = np.asarray(extrinsics, dtype=float)
    if mat.shape != (4, 4):
        raise ValueError(f"expected a 4x4 matrix, got shape {mat.shape}")
    rot, center = mat[:3, :3], mat[:3, 3]
    if not np.allclose(rot.T @ rot, np.eye(3), atol=atol) or np.linalg.det(rot) < 0:
        raise ValueError("rotation block is not a proper rotation")
    radius = float(np.linalg.norm(center))
    if radius <= 0:
        raise ValueError("camera center coincides with the origin")
    if not np.allclose(rot[:, 2], center / radius, atol=atol):
        raise ValueError("camera does not look at the origin")
    if abs(rot[1, 0]) > atol:
        raise ValueError("camera has non-zero roll; not a +y-up look-at camera")
    yaw = math.atan2(-rot[2, 0], rot[0, 0])
    pitch = math.asin(float(np.clip(center[1] / radius, -1.0, 1.0)))
    return CameraPose(yaw, pitch, radius, fov)


def camera_directions(height: int, width: int, fov: float, dtype=torch.float32) -> torch.Tensor:
    """Unit ray directions in the camera frame, H x W x 3, pixel centers at +0.5."""
    if height < 1 or width < 1:
        raise ValueError("resolution must be at least 1x1")
    focal = 0.5 * width / math.tan(0.5 * fov)
    u = torch.arange(width, dtype=torch.float64) + 0.5
    v = torch.arange(height, dtype=torch.float64) + 0.5
    vv, uu = torch.meshgrid(v, u, indexing="ij")
    dirs = torch.stack(
        [(uu - 0.5 * width) / focal, -(vv - 0.5 * height) / focal, -torch.ones_like(uu)], -1
    )
    dirs = dirs / dirs.norm(dim=-1, keepdim=True)
    return dirs.to(dtype)


def rays_for_angles(yaw: torch.Tensor, pitch: torch.Tensor, height: int, width: int,
                    camera: CameraConfig) -> tuple[torch.Tensor, torch.Tensor]:
    """Batched ray generation.

    Returns world-space origins ``(B, 3)`` and unit directions ``(B, H, W, 3)``.
    """
    dtype = yaw.dtype if yaw.is_floating_point() else torch.float32
    rot = _rotation(yaw.to(torch.float64), pitch.to(torch.float64), torch)  # B x 3 x 3
    dirs = camera_directions(height, width, camera.fov, torch.float64)
    world = torch.einsum("bij,hwj->bhwi", rot, dirs)
    world = world / world.norm(dim=-1, keepdim=True)
    origins = camera.radius * rot[..., 2]
    return origins.to(dtype), world.to(dtype)


def generate_rays(pose: CameraPose, resolution: tuple[int, int], camera: CameraConfig | None = None) -> RayBundle:
    camera = camera or CameraConfig(radius=pose.radius, fov=pose.fov)
    height, width = resolution
    rot = _rotation(np.asarray(pose.yaw, float), np.asarray(pose.pitch, float), np)
    dirs = camera_directions(height, width, pose.fov, torch.float64).numpy() @ rot.T
    dirs /= np.linalg.norm(dirs, axis=-1, keepdims=True)
    origins = np.broadcast_to(pose.radius * rot[:, 2], dirs.shape).copy()
    return RayBundle(origins, dirs, camera.near, camera.far)


def sample_pose_prior(rng: np.random.Generator, prior: PosePrior | None = None,
                      camera: CameraConfig | None = None) -> CameraPose:
    prior = prior or PosePrior()
    camera = camera or CameraConfig(prior=prior)
    yaw = rng.uniform(*prior.yaw_range)
    pitch = rng.uniform(*prior.pitch_range)
    return camera.pose(float(yaw), float(pitch))


def sample_poses(rng: np.random.Generator, n: int, prior: PosePrior | None = None) -> np.ndarray:
    """Vectorised prior draw, ``(n, 2)`` array of (yaw, pitch)."""
    prior = prior or PosePrior()
    return rng.uniform(prior.low, prior.high, size=(n, 2))


def clamp_to_prior(poses: torch.Tensor, prior: PosePrior) -> torch.Tensor:
    low = torch.as_tensor(prior.low, dtype=poses.dtype)
    high = torch.as_tensor(prior.high, dtype=poses.dtype)
    return torch.maximum(torch.minimum(poses, high), low)
