"""Dataset loading: a small binary image format plus seeded synthetic tasks.

The on-disk format is little-endian: magic ``HMDS``, u32 version (1), u32
sample count, u32 channels, u32 height, u32 width, u32 class count, then per
sample C*H*W float32 pixels followed by one u32 label.

Synthetic datasets are addressed as ``synthetic:<name>:<seed>[:<count>]``
with names blobs2 (two Gaussian blob classes differing in colour and
position), blobs3 (three such classes) and stripes2 (horizontal versus
vertical stripes, which channel statistics alone cannot separate).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from .errors import ConfigError, FormatError
from .rng import derive_seed, generator

MAGIC = b"HMDS"
VERSION = 1


@dataclass
class Dataset:
    x: np.ndarray  # (N, C, H, W) float64
    y: np.ndarray  # (N,) int64
    num_classes: int
    name: str
    mean: Optional[np.ndarray] = None  # per-channel stats used to normalise
    std: Optional[np.ndarray] = None

    def take(self, indices) -> "Dataset":
        idx = np.asarray(indices)
        return replace(self, x=self.x[idx].copy(), y=self.y[idx].copy())

    def channel_stats(self) -> tuple[np.ndarray, np.ndarray]:
        mean = self.x.mean(axis=(0, 2, 3))
        std = self.x.std(axis=(0, 2, 3))
        return mean, np.maximum(std, 1e-6)

    def normalized(self, mean: np.ndarray, std: np.ndarray) -> "Dataset":
        xn = (self.x - mean[None, :, None, None]) / std[None, :, None, None]
        return replace(self, x=xn, mean=mean.copy(), std=std.copy())


def save_dataset(path, data: Dataset):
    n, c, h, w = data.x.shape
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<IIIIII", VERSION, n, c, h, w, data.num_classes))
        for i in range(n):
            f.write(data.x[i].astype("<f4").tobytes())
            f.write(struct.pack("<I", int(data.y[i])))


def _load_file(path) -> Dataset:
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 28:
        raise FormatError(f"{path}: truncated header")
    if blob[:4] != MAGIC:
        raise FormatError(f"{path}: bad magic {blob[:4]!r}")
    version, n, c, h, w, k = struct.unpack("<IIIIII", blob[4:28])
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    if n < 1 or c < 1 or h < 1 or w < 1 or k < 2:
        raise FormatError(f"{path}: degenerate dimensions {(n, c, h, w, k)}")
    sample = c * h * w * 4 + 4
    if len(blob) != 28 + n * sample:
        raise FormatError(
            f"{path}: expected {28 + n * sample} bytes, got {len(blob)}")
    x = np.empty((n, c, h, w), dtype=np.float64)
    y = np.empty(n, dtype=np.int64)
    off = 28
    for i in range(n):
        px = np.frombuffer(blob, dtype="<f4", count=c * h * w, offset=off)
        x[i] = px.reshape(c, h, w)
        off += c * h * w * 4
        (label,) = struct.unpack_from("<I", blob, off)
        off += 4
        if label >= k:
            raise FormatError(
                f"{path}: sample {i} label {label} outside {k} classes")
        y[i] = label
    if not np.isfinite(x).all():
        raise FormatError(f"{path}: non-finite pixel values")
    return Dataset(x, y, int(k), str(path))


def _blob_image(rng, center, color, size=16):
    h = np.arange(size)
    cy = center[0] + rng.uniform(-2.0, 2.0)
    cx = center[1] + rng.uniform(-2.0, 2.0)
    d2 = (h[:, None] - cy) ** 2 + (h[None, :] - cx) ** 2
    blob = np.exp(-d2 / (2.0 * 2.5 ** 2))
    amp = rng.uniform(0.8, 1.2)
    img = amp * color[:, None, None] * blob[None]
    img += rng.normal(0.0, 0.05, img.shape)
    return img


_BLOB_CENTERS = [(5.0, 5.0), (10.0, 10.0), (5.0, 11.0)]
_BLOB_COLORS = [np.array([1.0, 0.3, 0.1]),
                np.array([0.2, 0.9, 0.4]),
                np.array([0.4, 0.3, 1.0])]


def _make_blobs(seed: int, count: int, classes: int, name: str) -> Dataset:
    rng = generator(derive_seed(seed, "synthetic", name))
    x = np.empty((count, 3, 16, 16), dtype=np.float64)
    y = np.empty(count, dtype=np.int64)
    for i in range(count):
        c = i % classes
        x[i] = _blob_image(rng, _BLOB_CENTERS[c], _BLOB_COLORS[c])
        y[i] = c
    perm = rng.permutation(count)
    return Dataset(x[perm], y[perm], classes, name)


def _make_stripes(seed: int, count: int, name: str) -> Dataset:
    rng = generator(derive_seed(seed, "synthetic", name))
    x = np.empty((count, 3, 16, 16), dtype=np.float64)
    y = np.empty(count, dtype=np.int64)
    grid = np.arange(16, dtype=np.float64)
    for i in range(count):
        c = i % 2
        period = rng.uniform(3.0, 6.0)
        phase = rng.uniform(0.0, 2.0 * np.pi)
        wave = 0.5 * np.sin(2.0 * np.pi * grid / period + phase) + 0.5
        plane = wave[:, None] if c == 0 else wave[None, :]
        img = np.broadcast_to(plane, (16, 16)).copy()
        x[i] = img[None] + rng.normal(0.0, 0.05, (3, 16, 16))
        y[i] = c
    perm = rng.permutation(count)
    return Dataset(x[perm], y[perm], 2, name)


def _synthetic(name: str, seed: int, count: int) -> Dataset:
    tag = f"synthetic:{name}:{seed}"
    if name == "blobs2":
        return replace(_make_blobs(seed, count, 2, tag))
    if name == "blobs3":
        return replace(_make_blobs(seed, count, 3, tag))
    if name == "stripes2":
        return replace(_make_stripes(seed, count, tag))
    raise ConfigError(f"unknown synthetic dataset {name!r}")


def load_dataset(source: str, count: int = 512) -> Dataset:
    """Load from a file path, or generate a synthetic set from a
    ``synthetic:<name>:<seed>[:<count>]`` specifier."""
    source = str(source)
    if source.startswith("synthetic:"):
        parts = source.split(":")
        if len(parts) not in (3, 4):
            raise ConfigError(
                f"synthetic spec must be synthetic:<name>:<seed>[:<count>], "
                f"got {source!r}")
        try:
            seed = int(parts[2])
            n = int(parts[3]) if len(parts) == 4 else count
        except ValueError as exc:
            raise ConfigError(f"bad synthetic spec {source!r}: {exc}") from None
        if n < 1:
            raise ConfigError(f"synthetic count must be >= 1, got {n}")
        return _synthetic(parts[1], seed, n)
    return _load_file(source)
