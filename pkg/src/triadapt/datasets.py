"""Image datasets on disk: a directory of PNGs with an optional ``index.json``.

``index.json`` maps each filename to ``{"pose": [yaw, pitch], "depth": "<file>.npy"}``.
Depth files are little-endian float32 ``.npy`` arrays. Folders of real drawings
carry no index; loading them yields images only.
"""
from __future__ import annotations

import io
import json
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .checkpoint import atomic_write_bytes, atomic_write_text

INDEX_NAME = "index.json"


@dataclass
class ImageDataset:
    images: np.ndarray  # (N, 3, H, W) float32 in [0, 1]
    names: list[str]
    poses: np.ndarray | None = None  # (N, 2)
    depths: np.ndarray | None = None  # (N, H, W)

    def __len__(self):
        return len(self.images)

    @property
    def has_ground_truth(self) -> bool:
        return self.poses is not None


def to_uint8(image) -> np.ndarray:
    """``(3, H, W)`` float image in [0, 1] -> ``(H, W, 3)`` uint8."""
    arr = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    return np.round(arr.transpose(1, 2, 0) * 255.0).astype(np.uint8)


def png_bytes(image) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(to_uint8(image), mode="RGB").save(buf, format="PNG")
    return buf.getvalue()


def npy_bytes(array) -> bytes:
    buf = io.BytesIO()
    np.save(buf, np.ascontiguousarray(array, dtype="<f4"))
    return buf.getvalue()


def write_png(path, image) -> None:
    atomic_write_bytes(path, png_bytes(image))


def write_npy(path, array) -> None:
    atomic_write_bytes(path, npy_bytes(array))


def read_png(path, resolution: int | None = None) -> np.ndarray:
    with Image.open(path) as im:
        im = im.convert("RGB")
        if resolution is not None and im.size != (resolution, resolution):
            im = im.resize((resolution, resolution), Image.BILINEAR)
        arr = np.asarray(im, dtype=np.float32) / 255.0
    return arr.transpose(2, 0, 1).copy()


def save_dataset(directory, images, poses=None, depths=None, prefix: str = "img") -> Path:
    """Write ``images`` (and optional ground truth) as PNGs plus ``index.json``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    index = {}
    for i, image in enumerate(images):
        name = f"{prefix}_{i:05d}.png"
        write_png(directory / name, image)
        entry = {}
        if poses is not None:
            entry["pose"] = [float(v) for v in poses[i]]
        if depths is not None:
            depth_name = f"{prefix}_{i:05d}_depth.npy"
            write_npy(directory / depth_name, depths[i])
            entry["depth"] = depth_name
        index[name] = entry
    if poses is not None or depths is not None:
        atomic_write_text(directory / INDEX_NAME, json.dumps(index, indent=1, sort_keys=True))
    return directory


def load_dataset(directory, resolution: int | None = None) -> ImageDataset:
    """Load a PNG directory; ground truth is attached when ``index.json`` provides it for every file."""
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"dataset directory not found: {directory}")
    names = sorted(n for n in os.listdir(directory) if n.lower().endswith(".png"))
    if not names:
        raise ValueError(f"no PNG images in {directory}")
    images = np.stack([read_png(directory / n, resolution) for n in names])
    poses = depths = None
    index_path = directory / INDEX_NAME
    if index_path.exists():
        index = json.loads(index_path.read_text())
        missing = [n for n in names if n not in index]
        if missing:
            raise ValueError(f"{index_path} has no entry for {missing[:3]}")
        if all("pose" in index[n] for n in names):
            poses = np.array([index[n]["pose"] for n in names], dtype=np.float64)
        if all("depth" in index[n] for n in names):
            depths = np.stack([np.load(directory / index[n]["depth"]) for n in names]).astype(np.float32)
            if depths.shape[-2:] != images.shape[-2:]:
                raise ValueError("depth maps do not match the image resolution")
    return ImageDataset(images=images, names=names, poses=poses, depths=depths)
