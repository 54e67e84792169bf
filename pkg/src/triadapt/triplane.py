"""Tri-plane neural field: three axis-aligned feature grids plus a small MLP decoder."""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

# (column axis, row axis) of each plane, in world coordinates x=0, y=1, z=2
PLANE_AXES = ((0, 1), (0, 2), (1, 2))  # XY, XZ, YZ


@dataclass
class TriPlane:
    """Feature planes of shape ``(B, 3, C, R, R)`` covering ``[-extent, extent]^3``.

    Plane ``k`` is indexed ``[c, row, col]`` with columns along
    ``PLANE_AXES[k][0]`` and rows along ``PLANE_AXES[k][1]``. Texel centers
    sit on a uniform grid whose first and last centers lie on the cube faces.
    """

    planes: torch.Tensor
    extent: float = 1.0

    def __post_init__(self):
        if self.planes.dim() == 4:
            self.planes = self.planes.unsqueeze(0)
        if self.planes.dim() != 5 or self.planes.shape[1] != 3:
            raise ValueError(f"expected planes of shape (B, 3, C, R, R), got {tuple(self.planes.shape)}")
        if self.planes.shape[-1] != self.planes.shape[-2]:
            raise ValueError("planes must be square")

    @property
    def batch_size(self) -> int:
        return self.planes.shape[0]

    @property
    def channels(self) -> int:
        return self.planes.shape[2]

    @property
    def resolution(self) -> int:
        return self.planes.shape[-1]


@dataclass
class FieldSample:
    color: torch.Tensor  # (..., 3) in [0, 1]
    density: torch.Tensor  # (...,) >= 0


def sample_features(tp: TriPlane, points: torch.Tensor) -> torch.Tensor:
    """Bilinear tri-plane lookup, summed over the three planes.

    ``points`` is ``(N, 3)`` (shared across the batch) or ``(B, N, 3)``.
    Returns ``(B, N, C)``. Points outside the cube are clamped to its border.
    """
    if points.dim() == 2:
        points = points.unsqueeze(0).expand(tp.batch_size, -1, -1)
    batch, n, _ = points.shape
    if batch != tp.batch_size:
        raise ValueError(f"points batch {batch} does not match tri-plane batch {tp.batch_size}")
    coords = (points / tp.extent).clamp(-1.0, 1.0)
    grids = torch.stack([coords[..., list(axes)] for axes in PLANE_AXES], 1)  # B, 3, N, 2
    channels, res = tp.channels, tp.resolution
    planes = tp.planes.reshape(batch * 3, channels, res, res)
    grids = grids.reshape(batch * 3, 1, n, 2).to(planes.dtype)
    feats = F.grid_sample(planes, grids, mode="bilinear", padding_mode="border", align_corners=True)
    # (B*3, C, 1, N) -> (B, 3, C, N) -> sum planes -> (B, N, C)
    return feats.reshape(batch, 3, channels, n).sum(1).permute(0, 2, 1)


class FieldDecoder(nn.Module):
    """Maps aggregated features to (color, density).

    Softplus hidden activations keep the field smooth, which matters for the
    depth-normal losses and for finite-difference checks.
    """

    def __init__(self, in_features: int = 16, hidden: int = 64, n_hidden: int = 2,
                 density_bias: float = -1.0):
        super().__init__()
        layers = []
        width = in_features
        for _ in range(n_hidden):
            layers.append(nn.Linear(width, hidden))
            width = hidden
        self.hidden = nn.ModuleList(layers)
        self.out = nn.Linear(width, 4)
        for layer in self.hidden:
            nn.init.normal_(layer.weight, std=1.0 / math.sqrt(layer.in_features))
            nn.init.zeros_(layer.bias)
        nn.init.normal_(self.out.weight, std=1.0 / math.sqrt(width))
        nn.init.zeros_(self.out.bias)
        with torch.no_grad():
            self.out.bias[0] = density_bias

    def forward(self, features: torch.Tensor) -> FieldSample:
        x = features
        for layer in self.hidden:
            x = F.softplus(layer(x))
        raw = self.out(x)
        return FieldSample(color=torch.sigmoid(raw[..., 1:]), density=F.softplus(raw[..., 0]))


def decode(decoder: FieldDecoder, features: torch.Tensor) -> FieldSample:
    return decoder(features)


def field_query(tp: TriPlane, decoder: FieldDecoder, points: torch.Tensor) -> FieldSample:
    return decoder(sample_features(tp, points))
