"""Procedural head scenes with exact depth, used as a source/target benchmark pair.

Each scene is a union of ellipsoids (head, hair cap, eyes, nose, mouth),
ray-cast analytically. The source domain uses smooth Lambertian shading.
The target domain perturbs the shape parameters (larger eyes, longer face,
smaller nose) and stylizes the image: banded shading, a quantized palette
and dark outlines along silhouette and part boundaries.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .camera import CameraConfig, camera_directions, _rotation, sample_poses

LIGHT_DIR = np.array([0.35, 0.55, 1.0]) / np.linalg.norm([0.35, 0.55, 1.0])
AMBIENT = 0.35

SKIN_TONES = np.array([
    [0.96, 0.80, 0.69], [0.87, 0.67, 0.53], [0.76, 0.57, 0.42],
    [0.58, 0.40, 0.29], [0.92, 0.74, 0.62], [0.70, 0.50, 0.38],
])
HAIR_TONES = np.array([
    [0.10, 0.07, 0.05], [0.35, 0.22, 0.12], [0.60, 0.45, 0.25],
    [0.80, 0.70, 0.45], [0.25, 0.25, 0.28], [0.45, 0.15, 0.08],
])
# target palette: flat, saturated "illustration" colors
TARGET_SKIN = np.array([[0.98, 0.88, 0.80], [0.95, 0.80, 0.85], [0.85, 0.92, 0.98], [0.99, 0.95, 0.70]])
TARGET_HAIR = np.array([[0.15, 0.25, 0.75], [0.85, 0.20, 0.30], [0.20, 0.65, 0.35], [0.95, 0.60, 0.10],
                        [0.55, 0.25, 0.75]])

# part ids
BACKGROUND, HEAD, HAIR, EYE, NOSE, MOUTH = range(6)


@dataclass
class Ellipsoid:
    center: np.ndarray
    axes: np.ndarray
    color: np.ndarray
    part: int
    # hair cap: surface kept only where dot(p - center, clip_normal) > clip_offset
    clip_normal: np.ndarray | None = None
    clip_offset: float = 0.0

    def implicit(self, points):
        q = (points - self.center) / self.axes
        return np.sum(q * q, axis=-1) - 1.0


@dataclass
class SyntheticSample:
    image: np.ndarray  # (3, H, W) float32 in [0, 1]
    pose: np.ndarray  # (yaw, pitch)
    depth: np.ndarray  # (H, W) float32, ray distance, far where empty


def _surface_point(axes, yaw_angle, pitch_angle):
    d = np.array([np.sin(yaw_angle) * np.cos(pitch_angle), np.sin(pitch_angle),
                  np.cos(yaw_angle) * np.cos(pitch_angle)])
    # scale the direction onto the ellipsoid surface
    return d / np.sqrt(np.sum((d / axes) ** 2))


def make_scene(rng: np.random.Generator, kind: str = "source") -> list[Ellipsoid]:
    """Random head scene; ``kind='target'`` applies the shape warps."""
    head_axes = np.array([rng.uniform(0.50, 0.58), rng.uniform(0.62, 0.70), rng.uniform(0.52, 0.60)])
    eye_r = rng.uniform(0.07, 0.09)
    eye_yaw = rng.uniform(0.33, 0.42)
    eye_pitch = rng.uniform(0.10, 0.18)
    nose_scale = rng.uniform(0.9, 1.1)
    mouth_w = rng.uniform(0.12, 0.16)
    skin = SKIN_TONES[rng.integers(len(SKIN_TONES))] * rng.uniform(0.92, 1.05)
    hair = HAIR_TONES[rng.integers(len(HAIR_TONES))] * rng.uniform(0.9, 1.1)
    eye_col = np.array([0.08, 0.06, 0.10]) + rng.uniform(0, 0.12, 3)
    hair_front = rng.uniform(0.0, 0.08)
    if kind == "target":
        # drawing-style shape deformation of the parameters
        head_axes = head_axes * np.array([rng.uniform(0.88, 1.0), rng.uniform(1.0, 1.12), rng.uniform(0.9, 1.0)])
        eye_r *= rng.uniform(1.5, 1.9)
        eye_yaw *= rng.uniform(0.95, 1.12)
        eye_pitch *= rng.uniform(0.4, 0.9)
        nose_scale *= rng.uniform(0.45, 0.7)
        mouth_w *= rng.uniform(0.5, 0.8)
        skin = TARGET_SKIN[rng.integers(len(TARGET_SKIN))]
        hair = TARGET_HAIR[rng.integers(len(TARGET_HAIR))]
        eye_col = np.array([0.05, 0.05, 0.08]) + 0.6 * hair * rng.uniform(0.3, 0.8)
    skin, hair = np.clip(skin, 0, 1), np.clip(hair, 0, 1)

    scene = [Ellipsoid(np.zeros(3), head_axes, skin, HEAD)]
    hair_axes = head_axes + np.array([0.045, 0.05, 0.045])
    scene.append(Ellipsoid(np.array([0.0, 0.03, -0.02]), hair_axes, hair, HAIR,
                           clip_normal=np.array([0.0, 1.0, -0.9]) / np.hypot(1.0, 0.9),
                           clip_offset=hair_front))
    for side in (-1.0, 1.0):
        c = _surface_point(head_axes, side * eye_yaw, eye_pitch) * (1.0 - 0.6 * eye_r)
        scene.append(Ellipsoid(c, np.full(3, eye_r), eye_col, EYE))
    nose_c = np.array([0.0, -0.16 * head_axes[1], head_axes[2] * 0.93])
    scene.append(Ellipsoid(nose_c, np.array([0.06, 0.08, 0.11]) * nose_scale, skin * 0.93, NOSE))
    mouth_c = _surface_point(head_axes, 0.0, -0.55) * 0.985
    scene.append(Ellipsoid(mouth_c, np.array([mouth_w, 0.03, 0.04]), np.array([0.62, 0.18, 0.2]), MOUTH))
    return scene


def _intersect(ell: Ellipsoid, origins, dirs):
    """Nearest valid hit distance per ray (inf when missed)."""
    o = (origins - ell.center) / ell.axes
    d = dirs / ell.axes
    a = np.sum(d * d, -1)
    b = 2.0 * np.sum(o * d, -1)
    c = np.sum(o * o, -1) - 1.0
    disc = b * b - 4 * a * c
    hit = disc >= 0
    sq = np.sqrt(np.where(hit, disc, 0.0))
    t0 = (-b - sq) / (2 * a)
    t1 = (-b + sq) / (2 * a)
    best = np.full(a.shape, np.inf)
    for t in (t1, t0):  # t0 last so it wins when both are valid
        ok = hit & (t > 0)
        if ell.clip_normal is not None:
            p = origins + t[..., None] * dirs
            ok &= (p - ell.center) @ ell.clip_normal > ell.clip_offset
        best = np.where(ok & (t < best), t, best)
    return best


def raycast(scene: list[Ellipsoid], origins, dirs):
    """Return ``(t, part_index, normal)`` of the nearest hit; ``t=inf`` and index -1 when missed."""
    dists = np.stack([_intersect(e, origins, dirs) for e in scene], -1)
    idx = np.argmin(dists, -1)
    t = np.take_along_axis(dists, idx[..., None], -1)[..., 0]
    idx = np.where(np.isfinite(t), idx, -1)
    points = origins + np.where(np.isfinite(t), t, 0.0)[..., None] * dirs
    normals = np.zeros_like(points)
    for k, e in enumerate(scene):
        m = idx == k
        if m.any():
            g = (points[m] - e.center) / e.axes**2
            normals[m] = g / np.linalg.norm(g, axis=-1, keepdims=True)
    return t, idx, normals


def _view_rays(yaw, pitch, height, width, camera: CameraConfig, supersample: int = 1):
    rot = _rotation(np.asarray(yaw, float), np.asarray(pitch, float), np)
    dirs = camera_directions(height * supersample, width * supersample, camera.fov, torch.float64).numpy()
    # supersampled grid spans the same image plane as the base grid
    dirs = dirs @ rot.T
    dirs /= np.linalg.norm(dirs, axis=-1, keepdims=True)
    origins = np.broadcast_to(camera.radius * rot[:, 2], dirs.shape)
    return origins, dirs


def _shade(scene, idx, normals, stylize: bool, levels: int = 3):
    albedo = np.zeros(idx.shape + (3,))
    for k, e in enumerate(scene):
        albedo[idx == k] = e.color
    lambert = np.clip(normals @ LIGHT_DIR, 0.0, 1.0)
    if stylize:
        lambert = np.floor(lambert * levels + 0.5) / levels
        shade = 0.55 + 0.45 * lambert
    else:
        shade = AMBIENT + (1.0 - AMBIENT) * lambert
    rgb = albedo * shade[..., None]
    rgb[idx < 0] = 0.0
    return rgb


def _outline(idx, t):
    """Pixels on part boundaries or depth discontinuities."""
    edge = np.zeros(idx.shape, bool)
    tt = np.where(np.isfinite(t), t, 1e3)
    for axis in (0, 1):
        diff_id = np.diff(idx, axis=axis) != 0
        diff_t = np.abs(np.diff(tt, axis=axis)) > 0.08
        e = diff_id | diff_t
        sl_a = [slice(None)] * 2
        sl_b = [slice(None)] * 2
        sl_a[axis] = slice(1, None)
        sl_b[axis] = slice(None, -1)
        edge[tuple(sl_a)] |= e
        edge[tuple(sl_b)] |= e
    return edge & (idx >= 0)


def render_scene(scene, yaw, pitch, resolution: int, camera: CameraConfig, stylize: bool = False,
                 supersample: int = 2):
    """Image ``(3, H, W)`` and ray-distance depth ``(H, W)`` (``far`` where empty)."""
    s = supersample
    origins, dirs = _view_rays(yaw, pitch, resolution, resolution, camera, s)
    t, idx, normals = raycast(scene, origins, dirs)
    rgb = _shade(scene, idx, normals, stylize)
    if stylize:
        rgb = np.floor(rgb * 4.0 + 0.5) / 4.0
        rgb[_outline(idx, t)] = 0.06
    rgb = rgb.reshape(resolution, s, resolution, s, 3).mean(axis=(1, 3))
    # depth at the base pixel centers
    o_c, d_c = _view_rays(yaw, pitch, resolution, resolution, camera, 1)
    t_c, _, _ = raycast(scene, o_c, d_c)
    depth = np.where(np.isfinite(t_c), np.minimum(t_c, camera.far), camera.far)
    image = np.clip(rgb, 0.0, 1.0).transpose(2, 0, 1)
    return image.astype(np.float32), depth.astype(np.float32)


def verify_depth(scene, yaw, pitch, depth, camera: CameraConfig, tol: float = 1e-5) -> bool:
    """Check that every finite-depth pixel back-projects onto a scene surface."""
    res = depth.shape[0]
    o, d = _view_rays(yaw, pitch, res, res, camera, 1)
    hit = depth < camera.far
    p = o[hit] + depth[hit][:, None].astype(np.float64) * d[hit]
    resid = np.min(np.stack([np.abs(e.implicit(p)) for e in scene], -1), -1)
    # float32 storage of depth limits the achievable residual
    return bool(np.all(resid < tol * 1e2)) if len(resid) else True


def make_synthetic_domain(kind: str, n: int, seed: int, resolution: int = 32,
                          camera: CameraConfig | None = None) -> list[SyntheticSample]:
    """Deterministic dataset of ``n`` procedural heads at prior-sampled poses.

    ``kind='target'`` uses the same scene stream as ``'source'`` for a given
    seed, then warps and stylizes, so sample ``i`` of both domains share pose
    and base identity.
    """
    if kind not in ("source", "target"):
        raise ValueError(f"kind must be 'source' or 'target', got {kind!r}")
    if n < 1:
        raise ValueError("n must be >= 1")
    camera = camera or CameraConfig()
    poses = sample_poses(np.random.default_rng([seed, 0]), n, camera.prior)
    samples = []
    for i in range(n):
        rng = np.random.default_rng([seed, 1, i])
        scene = make_scene(rng, kind)
        yaw, pitch = poses[i]
        image, depth = render_scene(scene, yaw, pitch, resolution, camera, stylize=kind == "target")
        if not verify_depth(scene, yaw, pitch, depth, camera):
            raise RuntimeError(f"depth verification failed for sample {i}")
        samples.append(SyntheticSample(image=image, pose=poses[i].copy(), depth=depth))
    return samples


def stack_samples(samples: list[SyntheticSample]):
    """``(images (N,3,H,W), poses (N,2), depths (N,H,W))`` numpy arrays."""
    images = np.stack([s.image for s in samples])
    poses = np.stack([s.pose for s in samples])
    depths = np.stack([s.depth for s in samples])
    return images, poses, depths
