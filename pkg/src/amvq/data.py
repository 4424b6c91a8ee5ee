"""Panorama sources: procedural scenes and image directories."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".png", ".ppm")


def synth_panorama(seed: int, H: int = 64) -> np.ndarray:
    """Procedural (3, H, 2H) equirectangular scene in [-1, 1].

    Sky/ground gradient along latitude, soft-edged discs placed on the sphere
    and low-frequency noise built from integer longitudinal harmonics. Every
    term is periodic in longitude, so the image wraps at the +-180 degree seam.
    """
    if H < 32:
        raise ValueError(f"panorama height must be >= 32, got {H}")
    W = 2 * H
    rng = np.random.default_rng(seed)
    lon = ((np.arange(W) + 0.5) / W - 0.5) * 2 * math.pi
    lat = (0.5 - (np.arange(H) + 0.5) / H) * math.pi
    lon, lat = np.meshgrid(lon, lat)

    sky_top, sky_low, ground_hi, ground_low = rng.uniform(0.05, 0.95, size=(4, 3))
    horizon = rng.uniform(-0.15, 0.15)
    t = np.clip((lat - horizon) / (math.pi / 2 - horizon), 0, 1)
    g = np.clip((horizon - lat) / (math.pi / 2 + horizon), 0, 1)
    sky = sky_low[:, None, None] * (1 - t) + sky_top[:, None, None] * t
    ground = ground_hi[:, None, None] * (1 - g) + ground_low[:, None, None] * g
    blend = 1 / (1 + np.exp(-(lat - horizon) * 40))
    img = sky * blend + ground * (1 - blend)

    # discs: angular distance on the sphere is periodic in longitude by construction
    xyz = np.stack([np.cos(lat) * np.sin(lon), np.sin(lat), np.cos(lat) * np.cos(lon)])
    edge = 4 * math.pi / H
    for _ in range(int(rng.integers(4, 9))):
        c_lon = rng.uniform(-math.pi, math.pi)
        c_lat = rng.uniform(-1.0, 1.0)
        centre = np.array([math.cos(c_lat) * math.sin(c_lon), math.sin(c_lat), math.cos(c_lat) * math.cos(c_lon)])
        ang = np.arccos(np.clip(np.tensordot(centre, xyz, axes=(0, 0)), -1, 1))
        radius = rng.uniform(0.15, 0.6)
        alpha = np.clip((radius - ang) / edge + 0.5, 0, 1)
        alpha = alpha * alpha * (3 - 2 * alpha)
        colour = rng.uniform(0, 1, size=3)
        img = img * (1 - alpha) + colour[:, None, None] * alpha

    noise = np.zeros((H, W))
    for _ in range(6):
        k = int(rng.integers(1, 7))
        j = rng.uniform(1, 5)
        noise += rng.uniform(0.01, 0.04) * np.sin(k * lon + rng.uniform(0, 2 * math.pi)) \
            * np.cos(j * lat + rng.uniform(0, 2 * math.pi))
    img = np.clip(img + noise[None], 0, 1)

    # close the remaining gap between the first and last column
    gap = img[:, :, :1] - img[:, :, -1:]
    ramp = np.clip(1 - np.arange(8)[::-1] / 8, 0, 1)
    img[:, :, -8:] = np.clip(img[:, :, -8:] + gap * ramp, 0, 1)
    return (img * 2 - 1).astype(np.float32)


def load_image(path, height: int | None = None) -> np.ndarray:
    """Read an RGB image as a (3, H, W) float32 array in [-1, 1], optionally resized to H x 2H."""
    with Image.open(path) as im:
        im = im.convert("RGB")
        if height is not None and im.size != (2 * height, height):
            im = im.resize((2 * height, height), Image.BILINEAR)
        arr = np.asarray(im, dtype=np.float32)
    return (arr.transpose(2, 0, 1) / 127.5 - 1.0).astype(np.float32)


def save_image(path, x) -> None:
    """Write a (3, H, W) image in [-1, 1] as 8-bit PNG."""
    arr = np.asarray(getattr(x, "data", x), dtype=np.float64)
    u8 = np.clip(np.round((arr + 1.0) * 127.5), 0, 255).astype(np.uint8)
    Image.fromarray(u8.transpose(1, 2, 0)).save(path, format="PNG")


@dataclass
class Dataset:
    names: list[str]
    images: list[np.ndarray]
    skipped: list[tuple[str, str]] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.images)

    def __iter__(self):
        return iter(self.images)


def ingest_dataset(path, height: int = 64) -> Dataset:
    """Load every 2:1 PNG/PPM in a directory, in lexicographic order.

    Files with another aspect ratio are skipped with a warning and listed in
    ``Dataset.skipped``.
    """
    root = Path(path)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset directory {root} does not exist")
    files = sorted(p for p in root.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    names, images, skipped = [], [], []
    for p in files:
        with Image.open(p) as im:
            w, h = im.size
        if w != 2 * h:
            reason = f"aspect {w}x{h} is not 2:1"
            log.warning("skipping %s: %s", p.name, reason)
            skipped.append((p.name, reason))
            continue
        names.append(p.stem)
        images.append(load_image(p, height))
    if not images:
        raise ValueError(f"no usable equirectangular images in {root}")
    log.info("loaded %d images from %s (%d skipped)", len(images), root, len(skipped))
    return Dataset(names, images, skipped)


def synthetic_dataset(count: int, height: int = 64, seed: int = 0) -> Dataset:
    names = [f"synth{seed + i:04d}" for i in range(count)]
    return Dataset(names, [synth_panorama(seed + i, height) for i in range(count)])
