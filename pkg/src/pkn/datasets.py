"""Desk-scale image sets built from the photographs bundled with scikit-image.

Training tiles and held-out evaluation crops come from disjoint source
photographs. scikit-image is only needed for this module.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .image import save_image

TRAIN_SOURCES = ("astronaut", "coffee", "rocket", "moon", "brick", "grass", "gravel",
                 "hubble_deep_field", "immunohistochemistry", "retina", "clock", "cell")
HELDOUT_SOURCES = ("camera", "coins", "text", "page", "chelsea")


def gray_photo(name: str) -> np.ndarray:
    """A bundled photograph as a single-channel float image in [0, 1]."""
    from skimage import color, data

    img = getattr(data, name)()
    if img.ndim == 3:
        img = color.rgb2gray(img[..., :3])
    elif img.dtype == np.uint8:
        img = img / 255.0
    return np.asarray(img, dtype=np.float64)[None]


def tiles(img, size: int, stride: int):
    _, h, w = img.shape
    for y in range(0, h - size + 1, stride):
        for x in range(0, w - size + 1, stride):
            yield img[:, y:y + size, x:x + size]


def export_training_tiles(out_dir, size: int = 96, stride: int = 96,
                          sources=TRAIN_SOURCES, limit: int | None = None) -> list:
    """Write non-overlapping grayscale tiles as 8-bit PNGs; returns their paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for name in sources:
        for k, tile in enumerate(tiles(gray_photo(name), size, stride)):
            p = out / f"{name}_{k:03d}.png"
            save_image(tile, p)
            paths.append(p)
            if limit is not None and len(paths) >= limit:
                return paths
    return paths


def heldout_crops(size: int = 128, sources=HELDOUT_SOURCES) -> dict:
    """Center crops of the held-out photographs, quantized to 8 bits like saved images."""
    crops = {}
    for name in sources:
        img = gray_photo(name)
        _, h, w = img.shape
        s = min(size, h, w)
        y, x = (h - s) // 2, (w - s) // 2
        crops[name] = np.floor(img[:, y:y + s, x:x + s] * 255.0 + 0.5) / 255.0
    return crops


def export_heldout(out_dir, size: int = 128, sources=HELDOUT_SOURCES) -> list:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for name, crop in heldout_crops(size, sources).items():
        p = out / f"{name}.png"
        save_image(crop, p)
        paths.append(p)
    return paths
