"""Pose-conditioned discriminator, adversarial/R1 losses and geometric-prior losses."""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .camera import CameraConfig
from .renderer import gaussian_blur, normals_from_depth


@dataclass(frozen=True)
class LossWeights:
    """Balancing weights of the geometric loss and the R1 penalty."""

    alpha: float = 1.0
    beta: float = 0.1
    gamma: float = 1.0
    r1_weight: float = 1.0

    def __post_init__(self):
        for name in ("alpha", "beta", "gamma", "r1_weight"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")


class _Conv(nn.Module):
    def __init__(self, in_ch, out_ch, kernel, stride=1):
        super().__init__()
        self.weight = nn.Parameter(torch.randn(out_ch, in_ch, kernel, kernel))
        self.bias = nn.Parameter(torch.zeros(out_ch))
        self.gain = 1.0 / math.sqrt(in_ch * kernel * kernel)
        self.stride = stride
        self.padding = kernel // 2

    def forward(self, x):
        x = F.conv2d(x, self.weight * self.gain, self.bias, self.stride, self.padding)
        return F.leaky_relu(x, 0.2) * math.sqrt(2.0)


class DiscriminatorBlock(nn.Module):
    """conv3x3 -> conv3x3 stride 2. Block 0 also owns the input projection."""

    def __init__(self, in_ch, out_ch, from_rgb: int = 0):
        super().__init__()
        self.from_rgb = _Conv(from_rgb, in_ch, 1) if from_rgb else None
        self.conv0 = _Conv(in_ch, in_ch, 3)
        self.conv1 = _Conv(in_ch, out_ch, 3, stride=2)

    def forward(self, x):
        if self.from_rgb is not None:
            x = self.from_rgb(x)
        return self.conv1(self.conv0(x))


class PoseConditionedDiscriminator(nn.Module):
    """Image + pose -> realness logit.

    The pose goes through a small MLP whose output is broadcast as extra
    constant input channels. ``freeze_depth`` leading blocks are frozen.
    """

    def __init__(self, resolution: int = 32, channels: tuple[int, ...] = (32, 64, 64, 64),
                 pose_dim: int = 2, pose_embed: int = 4, freeze_depth: int = 2,
                 mbstd_group: int = 4):
        super().__init__()
        if resolution % 2 ** len(channels):
            raise ValueError("resolution must be divisible by 2**len(channels)")
        self.resolution = resolution
        self.pose_embed = nn.Sequential(nn.Linear(pose_dim, 16), nn.LeakyReLU(0.2), nn.Linear(16, pose_embed))
        chans = list(channels) + [channels[-1]]
        self.blocks = nn.ModuleList(
            DiscriminatorBlock(chans[i], chans[i + 1], from_rgb=(3 + pose_embed) if i == 0 else 0)
            for i in range(len(channels))
        )
        final_res = resolution // 2 ** len(channels)
        self.mbstd_group = mbstd_group
        self.head_conv = _Conv(chans[-1] + 1, chans[-1], 3)
        self.head_fc = nn.Linear(chans[-1] * final_res * final_res, chans[-1])
        self.head_out = nn.Linear(chans[-1], 1)
        self.freeze_depth = freeze_depth
        for block in self.blocks[:freeze_depth]:
            block.requires_grad_(False)

    def frozen_parameters(self):
        for block in self.blocks[: self.freeze_depth]:
            yield from block.parameters()

    def trainable_parameters(self):
        frozen = {id(p) for p in self.frozen_parameters()}
        return [p for p in self.parameters() if id(p) not in frozen]

    def set_freeze_depth(self, depth: int) -> None:
        self.freeze_depth = depth
        for i, block in enumerate(self.blocks):
            block.requires_grad_(i >= depth)

    def _mbstd(self, x):
        batch = x.shape[0]
        group = min(self.mbstd_group, batch)
        if batch % group:
            group = 1
        if group == 1:
            std = torch.zeros_like(x[:, :1])
        else:
            y = x.reshape(group, -1, *x.shape[1:])
            y = (y - y.mean(0)).square().mean(0).add(1e-8).sqrt()
            y = y.mean(dim=(1, 2, 3)).reshape(-1, 1, 1, 1)
            std = y.repeat(group, 1, *x.shape[2:])
        return torch.cat([x, std], 1)

    def forward(self, images, poses):
        if images.shape[-1] != self.resolution or images.shape[-2] != self.resolution:
            raise ValueError(f"expected {self.resolution}x{self.resolution} images")
        embed = self.pose_embed(poses.to(images.dtype))
        cond = embed[:, :, None, None].expand(-1, -1, *images.shape[-2:])
        x = torch.cat([images * 2.0 - 1.0, cond], 1)
        for block in self.blocks:
            x = block(x)
        x = self.head_conv(self._mbstd(x))
        x = F.leaky_relu(self.head_fc(x.flatten(1)), 0.2)
        return self.head_out(x).squeeze(-1)


def discriminate(disc: PoseConditionedDiscriminator, images, poses):
    return disc(images, poses)


def adversarial_losses(logit_real, logit_fake):
    """Non-saturating logistic losses ``(loss_D, loss_G)``, batch-averaged."""
    loss_d = F.softplus(logit_fake).mean() + F.softplus(-logit_real).mean()
    loss_g = F.softplus(-logit_fake).mean()
    return loss_d, loss_g


def r1_penalty(disc, real_images, poses):
    """Batch mean of the squared input-gradient norm of the real logits."""
    real_images = real_images.detach().requires_grad_(True)
    logits = disc(real_images, poses)
    (grad,) = torch.autograd.grad(logits.sum(), real_images, create_graph=True)
    return grad.square().sum(dim=(1, 2, 3)).mean()


def depth_similarity(d_fake, d_fake_photo, kernel_size: int = 15, sigma: float = 5.0):
    """Per-pixel mean squared difference of Gaussian-blurred depth maps."""
    if d_fake.shape != d_fake_photo.shape:
        raise ValueError(f"shape mismatch: {tuple(d_fake.shape)} vs {tuple(d_fake_photo.shape)}")
    diff = gaussian_blur(d_fake - d_fake_photo, kernel_size, sigma)
    return diff.square().mean()


def normal_smoothness(n_fake):
    """Mean over pixels of squared forward-difference gradients, summed over components.

    ``n_fake`` is ``(B, 3, H, W)`` or ``(3, H, W)``. Each pixel contributes the
    horizontal and vertical squared differences of all three components; the
    sum is averaged over the pixels where the difference is defined.
    """
    dx = n_fake[..., :, 1:] - n_fake[..., :, :-1]
    dy = n_fake[..., 1:, :] - n_fake[..., :-1, :]
    channel_dim = -3
    return dx.square().sum(channel_dim).mean() + dy.square().sum(channel_dim).mean()


def pose_loss(theta_target, theta_pred):
    """Batch mean of squared Euclidean (yaw, pitch) error."""
    theta_target = torch.as_tensor(theta_target)
    theta_pred = torch.as_tensor(theta_pred)
    return (theta_target.to(theta_pred.dtype) - theta_pred).square().sum(-1).mean()


@dataclass
class GeometricLoss:
    total: torch.Tensor
    depth: torch.Tensor
    normal: torch.Tensor
    pose: torch.Tensor


def geometric_loss(d_fake, d_fake_photo, n_fake, theta, theta_pred, weights: LossWeights,
                   camera: CameraConfig | None = None) -> GeometricLoss:
    """alpha * depth + beta * normal + gamma * pose, with every component kept for logging.

    ``n_fake`` may be ``None`` if ``camera`` is given; normals are then derived from ``d_fake``.
    A component with zero weight is still evaluated when its inputs exist so
    that it can be logged; ``d_fake_photo=None`` yields a zero depth term.
    """
    if n_fake is None:
        n_fake = normals_from_depth(d_fake, camera)
    zero = d_fake.new_zeros(())
    l_d = depth_similarity(d_fake, d_fake_photo) if d_fake_photo is not None else zero
    l_n = normal_smoothness(n_fake)
    l_p = pose_loss(theta, theta_pred) if theta_pred is not None else zero
    total = weights.alpha * l_d + weights.beta * l_n + weights.gamma * l_p
    return GeometricLoss(total=total, depth=l_d, normal=l_n, pose=l_p)
