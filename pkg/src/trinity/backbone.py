"""Frozen patch encoder standing in for a pretrained vision transformer.

Each non-overlapping patch is flattened, projected by a fixed Gaussian matrix
and offset by a 2-D sinusoidal position code. Nothing here is trainable.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import DimensionError


@dataclass(frozen=True)
class BackboneConfig:
    patch_size: int = 8
    feature_dim: int = 64
    seed: int = 0


@dataclass(frozen=True)
class FeatureMap:
    features: np.ndarray  # [Hf, Wf, D]
    height: int
    width: int

    @property
    def grid(self) -> tuple[int, int]:
        return self.features.shape[0], self.features.shape[1]

    @property
    def dim(self) -> int:
        return self.features.shape[2]

    def flat(self) -> np.ndarray:
        """Features as ``[Hf * Wf, D]`` rows in raster order."""
        return self.features.reshape(-1, self.dim)


@lru_cache(maxsize=16)
def projection(patch_size: int, feature_dim: int, seed: int) -> np.ndarray:
    fan_in = patch_size * patch_size * 3
    rng = np.random.default_rng(seed)
    w = rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=(fan_in, feature_dim))
    w.setflags(write=False)
    return w


@lru_cache(maxsize=16)
def position_code(hf: int, wf: int, dim: int) -> np.ndarray:
    """Half the channels encode the row, half the column, transformer-style."""
    half = dim // 2
    out = np.zeros((hf, wf, dim))
    for axis, (n, lo, width) in enumerate(((hf, 0, half), (wf, half, dim - half))):
        pos = np.arange(n, dtype=np.float64)[:, None]
        k = np.arange(width)
        freq = 1.0 / (10000.0 ** ((k // 2 * 2) / max(width, 1)))
        enc = np.where(k % 2 == 0, np.sin(pos * freq), np.cos(pos * freq))
        if axis == 0:
            out[:, :, lo:lo + width] = enc[:, None, :]
        else:
            out[:, :, lo:lo + width] = enc[None, :, :]
    out.setflags(write=False)
    return out


def encode_image(image: np.ndarray, cfg: BackboneConfig = BackboneConfig()) -> FeatureMap:
    img = np.asarray(image)
    if img.ndim != 3 or img.shape[2] != 3:
        raise DimensionError(f"expected an RGB image [H, W, 3], got {img.shape}")
    h, w, _ = img.shape
    p = cfg.patch_size
    if h % p or w % p or h == 0 or w == 0:
        raise DimensionError(f"image size {h}x{w} must be a non-zero multiple of patch size {p}")
    hf, wf = h // p, w // p
    x = img.astype(np.float64) / 255.0
    patches = x.reshape(hf, p, wf, p, 3).transpose(0, 2, 1, 3, 4).reshape(hf, wf, p * p * 3)
    feats = patches @ projection(p, cfg.feature_dim, cfg.seed) + position_code(hf, wf, cfg.feature_dim)
    return FeatureMap(feats, h, w)
