"""Colour overlays of label maps on images."""
from __future__ import annotations

import colorsys

import numpy as np

from .dataset_io import VOID, LabelMap

# fixed CS palette; ids past the end wrap around
CS_PALETTE = np.array([
    [70, 130, 230], [200, 60, 50], [240, 170, 30], [40, 150, 40], [150, 80, 200],
    [230, 90, 170], [120, 90, 50], [250, 230, 60], [90, 90, 90], [200, 120, 60],
    [60, 200, 120], [220, 40, 120], [140, 140, 40], [80, 40, 160], [170, 200, 230],
    [240, 240, 240],
], dtype=np.float64)


def cyan_shades(n: int, seed: int = 0) -> np.ndarray:
    rng = np.random.default_rng(seed)
    out = np.zeros((n, 3))
    for i in range(n):
        hue = rng.uniform(0.47, 0.55)
        sat = rng.uniform(0.35, 1.0)
        val = rng.uniform(0.45, 1.0)
        out[i] = colorsys.hsv_to_rgb(hue, sat, val)
    return out * 255.0


def overlay(image: np.ndarray, labels: LabelMap, alpha: float = 0.55, seed: int = 0) -> np.ndarray:
    img = np.asarray(image, dtype=np.float64)
    if img.shape[:2] != labels.codes.shape:
        raise ValueError(f"image {img.shape[:2]} and labels {labels.codes.shape} differ in size")
    colors = np.zeros_like(img)
    codes = labels.codes.astype(np.int64)
    cs = codes < labels.num_cs
    colors[cs] = CS_PALETTE[codes[cs] % len(CS_PALETTE)]
    shades = cyan_shades(labels.num_regions, seed)
    ca = labels.ca_mask
    colors[ca] = shades[codes[ca] - labels.num_cs]
    paint = codes != VOID
    out = img.copy()
    out[paint] = (1 - alpha) * img[paint] + alpha * colors[paint]
    return np.clip(np.round(out), 0, 255).astype(np.uint8)
