"""Input checks shared by the estimators and the CLI."""
from __future__ import annotations

import numpy as np
import torch


def check_images(X, resolution: int | None = None) -> np.ndarray:
    """Validate a batch of images and return it as float32 ``(N, 3, H, W)``.

    Accepts numpy arrays or tensors, channels-first, values in [0, 1].
    """
    if isinstance(X, torch.Tensor):
        X = X.detach().cpu().numpy()
    X = np.asarray(X, dtype=np.float32)
    if X.ndim == 3:
        X = X[None]
    if X.ndim != 4 or X.shape[1] != 3:
        raise ValueError(f"expected images of shape (N, 3, H, W), got {X.shape}")
    if len(X) == 0:
        raise ValueError("empty image batch")
    if resolution is not None and X.shape[-2:] != (resolution, resolution):
        raise ValueError(f"expected {resolution}x{resolution} images, got {X.shape[-2]}x{X.shape[-1]}")
    if not np.isfinite(X).all():
        raise ValueError("images contain non-finite values")
    if X.min() < 0.0 or X.max() > 1.0:
        raise ValueError("image values must lie in [0, 1]")
    return X


def check_poses(y, n: int | None = None) -> np.ndarray:
    if isinstance(y, torch.Tensor):
        y = y.detach().cpu().numpy()
    y = np.asarray(y, dtype=np.float64)
    if y.ndim == 1 and y.shape[0] == 2 and n in (None, 1):
        y = y[None]
    if y.ndim != 2 or y.shape[1] != 2:
        raise ValueError(f"expected poses of shape (N, 2), got {y.shape}")
    if n is not None and len(y) != n:
        raise ValueError(f"expected {n} poses, got {len(y)}")
    if not np.isfinite(y).all():
        raise ValueError("poses contain non-finite values")
    return y


def check_features(X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise ValueError(f"expected a 2-D feature matrix, got shape {X.shape}")
    if not np.isfinite(X).all():
        raise ValueError("features contain non-finite values")
    return X
