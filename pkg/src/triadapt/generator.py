"""Deformation-aware tri-plane generator.

z -> mapping -> w; z_d -> deformation MLP -> spatial residual added to the
first synthesis block; modulated/demodulated conv blocks -> 3*C channels
reshaped into three feature planes -> volume rendering.
"""
from __future__ import annotations

import copy
import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .camera import CameraConfig
from .renderer import RenderOutput, render_angles
from .triplane import FieldDecoder, TriPlane


@dataclass
class GeneratorConfig:
    z_dim: int = 64
    zd_dim: int = 16
    w_dim: int = 64
    mapping_layers: int = 4
    mapping_lr_mul: float = 0.01
    deform_hidden: int = 64
    deform_layers: int = 2
    block_channels: tuple[int, ...] = (64, 32, 32)  # one block per resolution, doubling from base_res
    base_res: int = 8
    plane_channels: int = 16
    decoder_hidden: int = 64
    decoder_layers: int = 2
    density_bias: float = -1.0
    extent: float = 1.0

    @property
    def plane_res(self) -> int:
        return self.base_res * 2 ** (len(self.block_channels) - 1)


@dataclass
class LatentBundle:
    z: torch.Tensor
    z_d: torch.Tensor
    w: torch.Tensor | None = None


def sample_latents(rng, n: int, cfg: GeneratorConfig, dtype=torch.float32) -> LatentBundle:
    """Draw i.i.d. standard-normal content and deformation codes from a numpy Generator."""
    z = torch.as_tensor(rng.standard_normal((n, cfg.z_dim)), dtype=dtype)
    z_d = torch.as_tensor(rng.standard_normal((n, cfg.zd_dim)), dtype=dtype)
    return LatentBundle(z=z, z_d=z_d)


class EqualizedLinear(nn.Module):
    """Linear layer with runtime weight scaling (equalized learning rate)."""

    def __init__(self, in_features: int, out_features: int, bias_init: float = 0.0,
                 lr_mul: float = 1.0, activation: bool = False):
        super().__init__()
        self.weight = nn.Parameter(torch.randn(out_features, in_features) / lr_mul)
        self.bias = nn.Parameter(torch.full((out_features,), float(bias_init)))
        self.weight_gain = lr_mul / math.sqrt(in_features)
        self.bias_gain = lr_mul
        self.activation = activation

    def forward(self, x):
        x = F.linear(x, self.weight * self.weight_gain, self.bias * self.bias_gain)
        return F.leaky_relu(x, 0.2) if self.activation else x


class MappingNetwork(nn.Module):
    def __init__(self, z_dim=64, w_dim=64, n_layers=4, lr_mul=0.01):
        super().__init__()
        dims = [z_dim] + [w_dim] * n_layers
        self.layers = nn.ModuleList(
            EqualizedLinear(a, b, lr_mul=lr_mul, activation=True) for a, b in zip(dims[:-1], dims[1:])
        )

    def forward(self, z):
        x = z * torch.rsqrt(z.square().mean(-1, keepdim=True) + 1e-8)
        for layer in self.layers:
            x = layer(x)
        return x


class DeformationNetwork(nn.Module):
    """MLP from z_d to a ``(C0, R0, R0)`` residual; last layer starts at exactly zero."""

    def __init__(self, zd_dim=16, hidden=64, n_hidden=2, out_channels=64, out_res=8):
        super().__init__()
        dims = [zd_dim] + [hidden] * n_hidden
        self.hidden = nn.ModuleList(
            EqualizedLinear(a, b, activation=True) for a, b in zip(dims[:-1], dims[1:])
        )
        self.out = EqualizedLinear(dims[-1], out_channels * out_res * out_res)
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)
        self.shape = (out_channels, out_res, out_res)

    def forward(self, z_d):
        x = z_d
        for layer in self.hidden:
            x = layer(x)
        return self.out(x).reshape(-1, *self.shape)


class ModulatedConv2d(nn.Module):
    def __init__(self, in_channels, out_channels, kernel_size, w_dim, demodulate=True):
        super().__init__()
        self.weight = nn.Parameter(torch.randn(out_channels, in_channels, kernel_size, kernel_size))
        self.affine = EqualizedLinear(w_dim, in_channels, bias_init=1.0)
        self.weight_gain = 1.0 / math.sqrt(in_channels * kernel_size * kernel_size)
        self.demodulate = demodulate
        self.padding = kernel_size // 2

    def styles(self, w):
        return self.affine(w)

    def modulated_weights(self, styles, demodulate: bool | None = None):
        """Per-sample weights ``(B, O, I, k, k)``: scale by style, optionally demodulate."""
        demodulate = self.demodulate if demodulate is None else demodulate
        wgt = self.weight.unsqueeze(0) * self.weight_gain * styles[:, None, :, None, None]
        if demodulate:
            wgt = wgt * torch.rsqrt(wgt.square().sum(dim=(2, 3, 4), keepdim=True) + 1e-8)
        return wgt

    def forward(self, x, w):
        batch, in_ch, h, wd = x.shape
        wgt = self.modulated_weights(self.styles(w))
        out_ch = wgt.shape[1]
        x = x.reshape(1, batch * in_ch, h, wd)
        wgt = wgt.reshape(batch * out_ch, in_ch, *wgt.shape[-2:])
        y = F.conv2d(x, wgt, padding=self.padding, groups=batch)
        return y.reshape(batch, out_ch, h, wd)


class SynthesisBlock(nn.Module):
    def __init__(self, in_channels, out_channels, w_dim, upsample: bool):
        super().__init__()
        self.upsample = upsample
        self.conv = ModulatedConv2d(in_channels, out_channels, 3, w_dim)
        self.bias = nn.Parameter(torch.zeros(out_channels))

    def forward(self, x, w):
        if self.upsample:
            x = F.interpolate(x, scale_factor=2, mode="nearest")
        x = self.conv(x, w) + self.bias[None, :, None, None]
        return F.leaky_relu(x, 0.2) * math.sqrt(2.0)


class SynthesisNetwork(nn.Module):
    """Learned constant -> modulated conv blocks -> tri-plane feature head."""

    def __init__(self, cfg: GeneratorConfig):
        super().__init__()
        ch = cfg.block_channels
        self.const = nn.Parameter(torch.randn(ch[0], cfg.base_res, cfg.base_res))
        self.blocks = nn.ModuleList(
            SynthesisBlock(ch[0] if i == 0 else ch[i - 1], ch[i], cfg.w_dim, upsample=i > 0)
            for i in range(len(ch))
        )
        self.head = ModulatedConv2d(ch[-1], 3 * cfg.plane_channels, 1, cfg.w_dim, demodulate=False)
        self.head_bias = nn.Parameter(torch.zeros(3 * cfg.plane_channels))
        self.plane_channels = cfg.plane_channels
        self.extent = cfg.extent

    def forward(self, w, residual=None) -> TriPlane:
        x = self.const.unsqueeze(0).expand(w.shape[0], -1, -1, -1)
        for i, block in enumerate(self.blocks):
            x = block(x, w)
            if i == 0 and residual is not None:
                x = x + residual
        x = self.head(x, w) + self.head_bias[None, :, None, None]
        planes = x.reshape(x.shape[0], 3, self.plane_channels, *x.shape[-2:])
        return TriPlane(planes, self.extent)


class TriPlaneGenerator(nn.Module):
    def __init__(self, cfg: GeneratorConfig | None = None, camera: CameraConfig | None = None,
                 resolution: int = 32, n_samples: int = 24, with_deformation: bool = True):
        super().__init__()
        self.cfg = cfg = cfg or GeneratorConfig()
        self.camera = camera or CameraConfig(extent=cfg.extent)
        self.resolution = resolution
        self.n_samples = n_samples
        self.mapping = MappingNetwork(cfg.z_dim, cfg.w_dim, cfg.mapping_layers, cfg.mapping_lr_mul)
        self.synthesis = SynthesisNetwork(cfg)
        self.decoder = FieldDecoder(cfg.plane_channels, cfg.decoder_hidden, cfg.decoder_layers,
                                    cfg.density_bias)
        self.deformation = self.make_deformation() if with_deformation else None

    def make_deformation(self) -> DeformationNetwork:
        cfg = self.cfg
        return DeformationNetwork(cfg.zd_dim, cfg.deform_hidden, cfg.deform_layers,
                                  cfg.block_channels[0], cfg.base_res)

    def attach_deformation(self, seed: int = 0) -> None:
        """Add a freshly initialized (zero-output) deformation branch."""
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.deformation = self.make_deformation().to(next(self.parameters()).dtype)

    def map_latent(self, z):
        return self.mapping(z)

    def deformation_residual(self, z_d):
        if self.deformation is None:
            return None
        return self.deformation(z_d)

    def synthesize_triplanes(self, w, residual=None) -> TriPlane:
        return self.synthesis(w, residual)

    def render_w(self, w, z_d, yaw, pitch, generator: torch.Generator | None = None,
                 n_samples: int | None = None) -> RenderOutput:
        residual = None if z_d is None else self.deformation_residual(z_d)
        tp = self.synthesize_triplanes(w, residual)
        return render_angles(tp, self.decoder, yaw, pitch, self.camera, self.resolution,
                             n_samples or self.n_samples, generator)

    def generate(self, z, z_d, yaw, pitch, generator: torch.Generator | None = None,
                 n_samples: int | None = None) -> RenderOutput:
        """G(z, z_d, theta). Pass ``z_d=None`` for the source (no-deformation) path."""
        return self.render_w(self.map_latent(z), z_d, yaw, pitch, generator, n_samples)

    def forward(self, z, z_d, yaw, pitch, generator=None):
        return self.generate(z, z_d, yaw, pitch, generator)

    @torch.no_grad()
    def mean_w(self, n: int = 1000, seed: int = 0) -> torch.Tensor:
        gen = torch.Generator().manual_seed(seed)
        dtype = next(self.parameters()).dtype
        z = torch.randn(n, self.cfg.z_dim, generator=gen, dtype=torch.float64).to(dtype)
        return self.map_latent(z).mean(0, keepdim=True)

    def frozen_copy(self) -> "TriPlaneGenerator":
        clone = copy.deepcopy(self)
        clone.requires_grad_(False)
        clone.eval()
        return clone


def render_generator(seed: int) -> torch.Generator:
    return torch.Generator().manual_seed(int(seed))


__all__ = [
    "GeneratorConfig", "LatentBundle", "sample_latents", "EqualizedLinear", "MappingNetwork",
    "DeformationNetwork", "ModulatedConv2d", "SynthesisNetwork", "TriPlaneGenerator",
    "render_generator",
]
