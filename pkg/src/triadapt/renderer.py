"""Differentiable volume rendering of tri-plane fields, plus depth-derived normals and blur."""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .camera import CameraConfig, CameraPose, camera_directions, rays_for_angles
from .triplane import FieldDecoder, TriPlane, field_query


@dataclass
class RenderOutput:
    """Channels-first render results for a batch of views.

    image ``(B, 3, H, W)`` in [0, 1]; depth and opacity ``(B, H, W)``. Depth is
    the expected termination distance along each unit-length ray, so it is a
    range, not a z-buffer value.
    """

    image: torch.Tensor
    depth: torch.Tensor
    opacity: torch.Tensor
    camera: CameraConfig

    @property
    def normals(self) -> torch.Tensor:
        return normals_from_depth(self.depth, self.camera)


def stratified_depths(n_rays: int, n_samples: int, near: float, far: float,
                      generator: torch.Generator | None, dtype=torch.float32) -> torch.Tensor:
    """Jittered depths, one uniform draw per stratum: ``(n_rays, n_samples)``."""
    if n_samples < 2:
        raise ValueError(f"n_samples must be >= 2, got {n_samples}")
    jitter = torch.rand(n_rays, n_samples, generator=generator, dtype=torch.float64)
    bins = torch.arange(n_samples, dtype=torch.float64)
    t = near + (bins + jitter) * ((far - near) / n_samples)
    return t.to(dtype)


def composite(density: torch.Tensor, color: torch.Tensor, t: torch.Tensor, far: float):
    """Alpha-composite samples along rays.

    ``density`` ``(..., S)``, ``color`` ``(..., S, 3)``, ``t`` ``(..., S)``
    sorted ascending. The last interval runs to ``far``. Returns
    ``(rgb, depth, opacity, weights)``; unterminated mass is assigned the far depth.
    """
    far_t = torch.full_like(t[..., :1], far)
    delta = torch.cat([t[..., 1:], far_t], -1) - t
    tau = density * delta
    alpha = 1.0 - torch.exp(-tau)
    # exclusive cumulative optical depth: T_i = exp(-sum_{j<i} tau_j) = prod_{j<i} (1 - alpha_j)
    optical = torch.cumsum(tau, -1) - tau
    weights = alpha * torch.exp(-optical)
    opacity = weights.sum(-1)
    rgb = (weights.unsqueeze(-1) * color).sum(-2)
    depth = (weights * t).sum(-1) + (1.0 - opacity) * far
    return rgb, depth, opacity, weights


def render_angles(tp: TriPlane, decoder: FieldDecoder, yaw: torch.Tensor, pitch: torch.Tensor,
                  camera: CameraConfig, resolution: int | tuple[int, int], n_samples: int,
                  generator: torch.Generator | None = None) -> RenderOutput:
    """Render one view per tri-plane in the batch at the given angles."""
    height, width = (resolution, resolution) if isinstance(resolution, int) else resolution
    batch = tp.batch_size
    dtype = tp.planes.dtype
    yaw = torch.as_tensor(yaw, dtype=dtype).reshape(-1).expand(batch)
    pitch = torch.as_tensor(pitch, dtype=dtype).reshape(-1).expand(batch)
    origins, dirs = rays_for_angles(yaw.detach(), pitch.detach(), height, width, camera)
    origins, dirs = origins.to(dtype), dirs.to(dtype)
    n_rays = height * width
    t = stratified_depths(batch * n_rays, n_samples, camera.near, camera.far, generator, dtype)
    t = t.reshape(batch, n_rays, n_samples)
    dirs = dirs.reshape(batch, n_rays, 1, 3)
    points = origins[:, None, None, :] + dirs * t.unsqueeze(-1)
    sample = field_query(tp, decoder, points.reshape(batch, n_rays * n_samples, 3))
    density = sample.density.reshape(batch, n_rays, n_samples)
    color = sample.color.reshape(batch, n_rays, n_samples, 3)
    rgb, depth, opacity, _ = composite(density, color, t, camera.far)
    image = rgb.reshape(batch, height, width, 3).permute(0, 3, 1, 2)
    return RenderOutput(
        image=image,
        depth=depth.reshape(batch, height, width),
        opacity=opacity.reshape(batch, height, width),
        camera=camera,
    )


def render(tp: TriPlane, decoder: FieldDecoder, pose: CameraPose, n_samples: int = 32,
           resolution: int | tuple[int, int] = 32, camera: CameraConfig | None = None,
           seed: int = 0) -> RenderOutput:
    """Single-pose convenience wrapper around :func:`render_angles`."""
    camera = camera or CameraConfig(radius=pose.radius, fov=pose.fov)
    gen = torch.Generator().manual_seed(seed)
    return render_angles(tp, decoder, torch.tensor([pose.yaw]), torch.tensor([pose.pitch]),
                         camera, resolution, n_samples, gen)


def backproject(depth: torch.Tensor, camera: CameraConfig) -> torch.Tensor:
    """Camera-frame points ``(B, H, W, 3)`` from ray-distance depth ``(B, H, W)``."""
    height, width = depth.shape[-2:]
    dirs = camera_directions(height, width, camera.fov, depth.dtype)
    return depth.unsqueeze(-1) * dirs


def normals_from_depth(depth: torch.Tensor, camera: CameraConfig, return_mask: bool = False,
                       eps: float = 1e-12):
    """Camera-frame unit normals ``(B, 3, H, W)`` from a depth map ``(B, H, W)``.

    Tangents are central differences of back-projected points (one-sided at
    the border). Normals face the camera (+z). Pixels whose tangent cross
    product vanishes get ``(0, 0, 1)``; ``return_mask`` also returns them.
    """
    squeeze = depth.dim() == 2
    if squeeze:
        depth = depth.unsqueeze(0)
    points = backproject(depth, camera)
    d_row, d_col = torch.gradient(points, dim=(1, 2))
    n = torch.cross(d_row, d_col, dim=-1)
    norm = n.norm(dim=-1, keepdim=True)
    degenerate = norm.squeeze(-1) <= eps
    fallback = torch.zeros_like(n)
    fallback[..., 2] = 1.0
    n = torch.where(degenerate.unsqueeze(-1), fallback, n / norm.clamp_min(eps))
    n = n.permute(0, 3, 1, 2)
    if squeeze:
        n, degenerate = n[0], degenerate[0]
    return (n, degenerate) if return_mask else n


def gaussian_kernel(kernel_size: int = 15, sigma: float = 5.0, dtype=torch.float64) -> torch.Tensor:
    if kernel_size % 2 != 1 or kernel_size < 1:
        raise ValueError(f"kernel_size must be odd and positive, got {kernel_size}")
    r = kernel_size // 2
    ax = torch.arange(-r, r + 1, dtype=torch.float64)
    kernel = torch.exp(-(ax[:, None] ** 2 + ax[None, :] ** 2) / (2.0 * sigma**2))
    return (kernel / kernel.sum()).to(dtype)


def gaussian_blur(maps: torch.Tensor, kernel_size: int = 15, sigma: float = 5.0) -> torch.Tensor:
    """Gaussian low-pass with reflection padding; accepts ``(H, W)`` or ``(B, H, W)``."""
    kernel = gaussian_kernel(kernel_size, sigma, maps.dtype)
    shape = maps.shape
    x = maps.reshape(-1, 1, *shape[-2:])
    pad = kernel_size // 2
    mode = "reflect" if min(shape[-2:]) > pad else "replicate"
    x = F.pad(x, (pad, pad, pad, pad), mode=mode)
    return F.conv2d(x, kernel[None, None]).reshape(shape)


__all__ = [
    "RenderOutput", "composite", "render", "render_angles", "stratified_depths",
    "normals_from_depth", "backproject", "gaussian_kernel", "gaussian_blur",
]
