"""Image -> (yaw, pitch) regression network and its scikit-learn style wrapper."""
from __future__ import annotations

import numpy as np
import torch
import torch.nn as nn
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted

from .camera import PosePrior, clamp_to_prior
from .losses import pose_loss
from .validation import check_images, check_poses


class PoseNet(nn.Module):
    """Strided conv backbone with a 2-unit linear head.

    ``forward`` returns the raw regression (used by every loss). ``estimate``
    clamps to the prior support.
    """

    def __init__(self, resolution: int = 32, channels: tuple[int, ...] = (16, 32, 64, 64),
                 prior: PosePrior | None = None):
        super().__init__()
        self.resolution = resolution
        self.prior = prior or PosePrior()
        layers = []
        in_ch = 3
        for ch in channels:
            layers += [nn.Conv2d(in_ch, ch, 3, stride=2, padding=1), nn.LeakyReLU(0.2)]
            in_ch = ch
        self.backbone = nn.Sequential(*layers)
        feat = in_ch * (resolution // 2 ** len(channels)) ** 2
        self.head = nn.Linear(feat, 2)
        nn.init.zeros_(self.head.weight)
        with torch.no_grad():
            self.head.bias.copy_(torch.as_tensor(self.prior.center, dtype=torch.float32))

    def forward(self, images):
        if images.shape[-2:] != (self.resolution, self.resolution):
            raise ValueError(
                f"expected {self.resolution}x{self.resolution} images, got {tuple(images.shape[-2:])}"
            )
        return self.head(self.backbone(images * 2.0 - 1.0).flatten(1))

    @torch.no_grad()
    def estimate(self, images):
        return clamp_to_prior(self(images), self.prior)


def estimate(net: PoseNet, images):
    return net.estimate(images)


def flip_augment(images, poses, rng: np.random.Generator, p: float = 0.5):
    """Mirror each image horizontally with probability ``p``; mirrored yaw changes sign."""
    flip = torch.as_tensor(rng.random(images.shape[0]) < p)
    images = torch.where(flip[:, None, None, None], images.flip(-1), images)
    sign = torch.where(flip, -1.0, 1.0).to(poses.dtype)
    poses = torch.stack([poses[:, 0] * sign, poses[:, 1]], -1)
    return images, poses


def make_pose_optimizer(net: PoseNet, lr: float = 1e-4, betas=(0.0, 0.99), eps: float = 1e-8):
    return torch.optim.Adam(net.parameters(), lr=lr, betas=betas, eps=eps)


def train_pose_step(net: PoseNet, optimizer: torch.optim.Optimizer, poses, images) -> float:
    """One optimizer step on the mean squared pose error; returns the pre-step loss."""
    if images.shape[0] == 0:
        raise ValueError("empty batch")
    net.train()
    optimizer.zero_grad(set_to_none=True)
    loss = pose_loss(poses, net(images))
    loss.backward()
    optimizer.step()
    return float(loss.detach())


class PoseRegressor(RegressorMixin, BaseEstimator):
    """Supervised pose regressor over ``(N, 3, H, W)`` images in [0, 1].

    ``predict`` returns ``(N, 2)`` (yaw, pitch) clamped to the prior box.
    """

    def __init__(self, resolution: int = 32, lr: float = 1e-4, n_iter: int = 2000,
                 batch_size: int = 32, flip: bool = True,
                 yaw_range: tuple[float, float] = (-0.5, 0.5),
                 pitch_range: tuple[float, float] = (-0.3, 0.3), random_state: int = 0):
        self.resolution = resolution
        self.lr = lr
        self.n_iter = n_iter
        self.batch_size = batch_size
        self.flip = flip
        self.yaw_range = yaw_range
        self.pitch_range = pitch_range
        self.random_state = random_state

    def _init_net(self):
        prior = PosePrior(tuple(self.yaw_range), tuple(self.pitch_range))
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(self.random_state)
            self.net_ = PoseNet(self.resolution, prior=prior)
        self.optimizer_ = make_pose_optimizer(self.net_, self.lr)
        self.loss_curve_ = []

    def fit(self, X, y):
        X = check_images(X, self.resolution)
        y = check_poses(y, len(X))
        self._init_net()
        return self._train(X, y, self.n_iter)

    def partial_fit(self, X, y, n_iter: int = 1):
        X = check_images(X, self.resolution)
        y = check_poses(y, len(X))
        if not hasattr(self, "net_"):
            self._init_net()
        return self._train(X, y, n_iter)

    def _train(self, X, y, n_iter):
        rng = np.random.default_rng(self.random_state + len(self.loss_curve_))
        images = torch.as_tensor(X, dtype=torch.float32)
        poses = torch.as_tensor(y, dtype=torch.float32)
        for _ in range(n_iter):
            idx = rng.choice(len(images), size=min(self.batch_size, len(images)), replace=False)
            xb, yb = images[idx], poses[idx]
            if self.flip:
                xb, yb = flip_augment(xb, yb, rng)
            self.loss_curve_.append(train_pose_step(self.net_, self.optimizer_, yb, xb))
        return self

    def predict(self, X):
        check_is_fitted(self, "net_")
        X = check_images(X, self.resolution)
        out = []
        self.net_.eval()
        for start in range(0, len(X), 256):
            out.append(self.net_.estimate(torch.as_tensor(X[start:start + 256], dtype=torch.float32)))
        return torch.cat(out).numpy().astype(np.float64)

    def score(self, X, y, sample_weight=None):
        """Negative mean squared pose error (higher is better)."""
        pred = self.predict(X)
        y = check_poses(y, len(pred))
        return -float(np.mean(np.sum((pred - y) ** 2, axis=1)))


def prior_mean_mse(prior: PosePrior) -> float:
    """Pose MSE of a constant predictor at the prior center."""
    return float(np.sum(prior.variance))

