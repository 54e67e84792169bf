"""FID / KID on a frozen random embedding, and depth/pose error against ground truth."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from sklearn.base import BaseEstimator, TransformerMixin

from .renderer import gaussian_blur
from .validation import check_features, check_images


@dataclass
class FeatureSet:
    features: np.ndarray  # (N, F)
    extractor: str = "random-conv"
    seed: int = 0

    def __post_init__(self):
        self.features = check_features(self.features)

    def __len__(self):
        return len(self.features)


class RandomConvEmbedding(nn.Module):
    """Fixed randomly-initialised conv net: 3 strided convs, then mean and std pooling.

    Layout: conv3x3(3->32, s2) -> lrelu -> conv3x3(32->64, s2) -> lrelu ->
    conv3x3(64->64, s2) -> lrelu -> [spatial mean, spatial std] (128 dims).
    """

    def __init__(self, seed: int = 0):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        specs = [(3, 32), (32, 64), (64, 64)]
        self.weights = nn.ParameterList()
        self.biases = nn.ParameterList()
        for cin, cout in specs:
            w = torch.randn(cout, cin, 3, 3, generator=gen, dtype=torch.float64) * np.sqrt(2.0 / (cin * 9))
            b = torch.randn(cout, generator=gen, dtype=torch.float64) * 0.1
            self.weights.append(nn.Parameter(w.float(), requires_grad=False))
            self.biases.append(nn.Parameter(b.float(), requires_grad=False))

    @torch.no_grad()
    def forward(self, images):
        x = images * 2.0 - 1.0
        for w, b in zip(self.weights, self.biases):
            x = F.leaky_relu(F.conv2d(x, w, b, stride=2, padding=1), 0.2)
        return torch.cat([x.mean(dim=(2, 3)), x.std(dim=(2, 3))], 1)


class FeatureExtractor(TransformerMixin, BaseEstimator):
    """Images ``(N, 3, H, W)`` -> 128-d embeddings. Stateless: ``fit`` only validates."""

    def __init__(self, seed: int = 0, batch_size: int = 256):
        self.seed = seed
        self.batch_size = batch_size

    def fit(self, X=None, y=None):
        self.net_ = RandomConvEmbedding(self.seed)
        return self

    def transform(self, X) -> np.ndarray:
        if not hasattr(self, "net_"):
            self.fit()
        X = check_images(X)
        out = [self.net_(torch.as_tensor(X[i:i + self.batch_size])) for i in range(0, len(X), self.batch_size)]
        return torch.cat(out).double().numpy()


def extract_features(images, extractor_seed: int = 0) -> FeatureSet:
    feats = FeatureExtractor(extractor_seed).fit().transform(images)
    return FeatureSet(feats, "random-conv", extractor_seed)


def _as_matrix(x) -> np.ndarray:
    return x.features if isinstance(x, FeatureSet) else check_features(x)


def _psd_sqrt(mat):
    vals, vecs = np.linalg.eigh(0.5 * (mat + mat.T))
    return (vecs * np.sqrt(np.clip(vals, 0.0, None))) @ vecs.T


def fid(a, b, eps: float = 1e-6) -> float:
    """Frechet distance between Gaussian fits of two feature sets.

    Covariances get ``eps * I`` added when either set has fewer rows than
    ``F + 1``. The trace of ``(S_a S_b)^{1/2}`` is computed from the
    eigenvalues of the symmetric matrix ``S_a^{1/2} S_b S_a^{1/2}``.
    """
    xa, xb = _as_matrix(a), _as_matrix(b)
    if xa.shape[1] != xb.shape[1]:
        raise ValueError(f"feature dimension mismatch: {xa.shape[1]} vs {xb.shape[1]}")
    if len(xa) < 2 or len(xb) < 2:
        raise ValueError("FID needs at least 2 samples per set")
    dim = xa.shape[1]
    mu_a, mu_b = xa.mean(0), xb.mean(0)
    cov_a, cov_b = np.cov(xa, rowvar=False), np.cov(xb, rowvar=False)
    if min(len(xa), len(xb)) < dim + 1:
        cov_a = cov_a + eps * np.eye(dim)
        cov_b = cov_b + eps * np.eye(dim)
    root_a = _psd_sqrt(cov_a)
    middle = root_a @ cov_b @ root_a
    vals = np.linalg.eigvalsh(0.5 * (middle + middle.T))
    tr_covmean = np.sqrt(np.clip(vals, 0.0, None)).sum()
    value = np.sum((mu_a - mu_b) ** 2) + np.trace(cov_a) + np.trace(cov_b) - 2.0 * tr_covmean
    return float(max(value, 0.0))


def _mmd2_unbiased(x, y):
    dim = x.shape[1]
    kxx = (x @ x.T / dim + 1.0) ** 3
    kyy = (y @ y.T / dim + 1.0) ** 3
    kxy = (x @ y.T / dim + 1.0) ** 3
    m, n = len(x), len(y)
    sxx = (kxx.sum() - np.trace(kxx)) / (m * (m - 1))
    syy = (kyy.sum() - np.trace(kyy)) / (n * (n - 1))
    return sxx + syy - 2.0 * kxy.mean()


def kid(a, b, block_size: int = 1000) -> float:
    """Unbiased polynomial-kernel MMD^2, averaged over aligned contiguous blocks.

    Block ``k`` pairs rows ``[k*m, (k+1)*m)`` of both sets with
    ``m = min(N_a, N_b, block_size)``, so the estimate is symmetric in its arguments.
    """
    xa, xb = _as_matrix(a), _as_matrix(b)
    if xa.shape[1] != xb.shape[1]:
        raise ValueError(f"feature dimension mismatch: {xa.shape[1]} vs {xb.shape[1]}")
    if len(xa) < 2 or len(xb) < 2:
        raise ValueError("KID needs at least 2 samples per set")
    if max(len(xa), len(xb)) <= block_size:
        return float(_mmd2_unbiased(xa, xb))
    m = min(len(xa), len(xb), block_size)
    n_blocks = min(len(xa), len(xb)) // m
    vals = [_mmd2_unbiased(xa[k * m:(k + 1) * m], xb[k * m:(k + 1) * m]) for k in range(n_blocks)]
    return float(np.mean(vals))


def kid_bootstrap_se(a, b, n_boot: int = 200, seed: int = 0) -> float:
    """Bootstrap standard error of :func:`kid` (rows resampled with replacement).

    Duplicated rows bias the unbiased estimator upward slightly; the spread
    is what matters here.
    """
    xa, xb = _as_matrix(a), _as_matrix(b)
    rng = np.random.default_rng(seed)
    vals = []
    for _ in range(n_boot):
        ia = rng.integers(0, len(xa), len(xa))
        ib = rng.integers(0, len(xb), len(xb))
        vals.append(kid(xa[ia], xb[ib]))
    return float(np.std(vals, ddof=1))


def geometry_error(pred, gt, align_median: bool = True, blur: bool = True,
                   kernel_size: int = 15, sigma: float = 5.0) -> tuple[float, float]:
    """``(depth_mse, pose_mse)`` over paired ``(depth, pose)`` items.

    Depths are Gaussian-blurred and, with ``align_median``, shifted so their
    medians agree before the per-pixel squared error. Pose error is the squared
    Euclidean (yaw, pitch) distance, averaged over items.
    """
    if len(pred) != len(gt):
        raise ValueError(f"length mismatch: {len(pred)} predictions vs {len(gt)} ground-truth items")
    if not pred:
        raise ValueError("empty input")
    d_pred = torch.as_tensor(np.stack([np.asarray(d, np.float64) for d, _ in pred]))
    d_gt = torch.as_tensor(np.stack([np.asarray(d, np.float64) for d, _ in gt]))
    if d_pred.shape != d_gt.shape:
        raise ValueError("depth shape mismatch")
    if blur:
        d_pred, d_gt = gaussian_blur(d_pred, kernel_size, sigma), gaussian_blur(d_gt, kernel_size, sigma)
    if align_median:
        flat_p, flat_g = d_pred.flatten(1), d_gt.flatten(1)
        shift = flat_g.median(1).values - flat_p.median(1).values
        d_pred = d_pred + shift[:, None, None]
    depth_mse = float((d_pred - d_gt).square().mean())
    p_pred = np.stack([np.asarray(p, np.float64) for _, p in pred])
    p_gt = np.stack([np.asarray(p, np.float64) for _, p in gt])
    pose_mse = float(np.mean(np.sum((p_pred - p_gt) ** 2, axis=1)))
    return depth_mse, pose_mse
