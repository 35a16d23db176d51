"""Synthetic sector-scan phantoms for smoke tests and demos.

Renders grayscale fan-shaped images with speckle texture and an elliptical
ring structure, loosely mimicking a curvilinear probe view, so the training
and evaluation plumbing can run without any clinical data.
"""

from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .dataset import TRANS_CEREBELLUM, DatasetManifest, scan_dataset
from .seeding import derive_seed, np_rng


def sector_phantom(size: int, seed: int) -> np.ndarray:
    """One (size, size) uint8 phantom; appearance varies with the seed."""
    rng = np_rng(seed)
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64) / size
    apex_y, apex_x = -0.08, 0.5 + rng.uniform(-0.05, 0.05)
    dy, dx = ys - apex_y, xs - apex_x
    radius = np.hypot(dy, dx)
    angle = np.arctan2(dx, dy)
    half_fan = np.deg2rad(rng.uniform(28.0, 42.0))
    fan = (np.abs(angle) < half_fan) & (radius > 0.12) & (radius < 1.02)

    speckle = rng.rayleigh(scale=1.0, size=(size, size))
    speckle = ndimage.gaussian_filter(speckle, sigma=max(1.0, size / 48))
    depth_gain = np.clip(1.25 - radius, 0.25, 1.0)
    tissue = 60.0 + 110.0 * speckle / speckle.max()

    cy, cx = rng.uniform(0.45, 0.6), rng.uniform(0.42, 0.58)
    ry, rx = rng.uniform(0.16, 0.25), rng.uniform(0.22, 0.33)
    tilt = rng.uniform(-0.4, 0.4)
    ey = (ys - cy) * np.cos(tilt) - (xs - cx) * np.sin(tilt)
    ex = (ys - cy) * np.sin(tilt) + (xs - cx) * np.cos(tilt)
    dist = np.hypot(ey / ry, ex / rx)
    ring = np.exp(-((dist - 1.0) / 0.08) ** 2)
    interior = dist < 0.85

    img = tissue * depth_gain
    img[interior] *= 0.45
    img += 90.0 * ring
    img[~fan] = rng.uniform(2.0, 8.0)
    return np.clip(img, 0, 255).astype(np.uint8)


def make_phantom_dataset(root, count: int, size: int, seed: int,
                         plane: str = TRANS_CEREBELLUM) -> DatasetManifest:
    """Write `count` phantom PNGs under `root` and return their manifest."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    for i in range(count):
        img = sector_phantom(size, derive_seed(seed, "phantom", i))
        Image.fromarray(img, mode="L").save(root / f"phantom_{i:04d}.png")
    return scan_dataset(root, plane)
