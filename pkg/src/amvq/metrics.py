"""Viewport-based quality metrics for equirectangular images.

Images are ``(3, H, W)`` float arrays on the 8-bit scale [0, 255] with
``W == 2H``. Equirectangular pixel ``(row, col)`` has its center at
continuous coordinates ``(u, v) = (col + 0.5, row + 0.5)``; longitude
``lon = (u / W - 0.5) * 2pi`` and latitude ``lat = (0.5 - v / H) * pi``.
A viewport looks along ``(yaw, pitch)`` through a pinhole whose focal length
gives the requested horizontal field of view.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.ndimage import correlate1d

from . import tensor as T
from .nn import Conv2d, Module

PSNR_CAP_DB = 100.0
BT601 = np.array([0.299, 0.587, 0.114])


@dataclass(frozen=True)
class ViewportSpec:
    yaw: float
    pitch: float
    fov: float
    out_width: int
    out_height: int

    def __post_init__(self):
        if not 0 < self.fov < math.pi:
            raise ValueError(f"fov must lie in (0, pi), got {self.fov}")
        if abs(self.pitch) > math.pi / 2:
            raise ValueError(f"|pitch| must be <= pi/2, got {self.pitch}")
        if self.out_width < 1 or self.out_height < 1:
            raise ValueError("viewport size must be positive")

    @property
    def focal(self) -> float:
        return (self.out_width / 2) / math.tan(self.fov / 2)


def default_viewports(image_height: int) -> list[ViewportSpec]:
    """Equatorial ring of 8 viewports, 90 degree fov, side min(256, H/2)."""
    side = min(256, max(11, image_height // 2))
    return [ViewportSpec(math.radians(y), 0.0, math.pi / 2, side, side) for y in range(0, 360, 45)]


def _rotation(spec: ViewportSpec) -> np.ndarray:
    """Camera (x right, y up, z forward) to world (x east, y up, z lon=0)."""
    cp, sp = math.cos(spec.pitch), math.sin(spec.pitch)
    cy, sy = math.cos(spec.yaw), math.sin(spec.yaw)
    pitch = np.array([[1, 0, 0], [0, cp, sp], [0, -sp, cp]])
    yaw = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    return yaw @ pitch


def viewport_to_sphere(spec: ViewportSpec, px, py) -> tuple[np.ndarray, np.ndarray]:
    """Continuous viewport coordinates to (lon, lat) in radians."""
    x = np.asarray(px, dtype=np.float64) - spec.out_width / 2
    y = spec.out_height / 2 - np.asarray(py, dtype=np.float64)
    d = np.stack([x, y, np.full_like(x, spec.focal)], axis=-1) @ _rotation(spec).T
    lon = np.arctan2(d[..., 0], d[..., 2])
    lat = np.arcsin(np.clip(d[..., 1] / np.linalg.norm(d, axis=-1), -1, 1))
    return lon, lat


def sphere_to_viewport(spec: ViewportSpec, lon, lat) -> tuple[np.ndarray, np.ndarray]:
    """(lon, lat) to continuous viewport coordinates (points behind the camera give nan)."""
    lon, lat = np.asarray(lon, np.float64), np.asarray(lat, np.float64)
    world = np.stack([np.cos(lat) * np.sin(lon), np.sin(lat), np.cos(lat) * np.cos(lon)], axis=-1)
    cam = world @ _rotation(spec)
    z = np.where(cam[..., 2] > 0, cam[..., 2], np.nan)
    px = spec.focal * cam[..., 0] / z + spec.out_width / 2
    py = spec.out_height / 2 - spec.focal * cam[..., 1] / z
    return px, py


def sphere_to_equirect(lon, lat, width: int, height: int) -> tuple[np.ndarray, np.ndarray]:
    u = (np.asarray(lon) / (2 * math.pi) + 0.5) * width
    v = (0.5 - np.asarray(lat) / math.pi) * height
    return u, v


def _bilinear(img: np.ndarray, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Sample (C, H, W) at continuous (u, v); columns wrap, rows clamp."""
    _, h, w = img.shape
    x = u - 0.5
    y = np.clip(v - 0.5, 0, h - 1)
    x0 = np.floor(x).astype(np.int64)
    y0 = np.floor(y).astype(np.int64)
    fx = x - x0
    fy = y - y0
    y1 = np.minimum(y0 + 1, h - 1)
    xa, xb = x0 % w, (x0 + 1) % w
    top = img[:, y0, xa] * (1 - fx) + img[:, y0, xb] * fx
    bot = img[:, y1, xa] * (1 - fx) + img[:, y1, xb] * fx
    return top * (1 - fy) + bot * fy


def extract_viewport(equirect: np.ndarray, spec: ViewportSpec) -> np.ndarray:
    """Gnomonic crop of a (C, H, 2H) equirectangular image."""
    img = np.asarray(equirect.data if isinstance(equirect, T.Tensor) else equirect, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 2 * img.shape[1]:
        raise ValueError(f"expected a (C, H, 2H) equirectangular image, got {img.shape}")
    py, px = np.mgrid[0:spec.out_height, 0:spec.out_width] + 0.5
    lon, lat = viewport_to_sphere(spec, px, py)
    u, v = sphere_to_equirect(lon, lat, img.shape[2], img.shape[1])
    return _bilinear(img, u, v)


def to_8bit_scale(x) -> np.ndarray:
    """[-1, 1] image to the [0, 255] float scale."""
    arr = np.asarray(x.data if isinstance(x, T.Tensor) else x, dtype=np.float64)
    return np.clip((arr + 1.0) * 127.5, 0.0, 255.0)


def _viewports(viewports: Sequence[ViewportSpec] | None, x: np.ndarray) -> list[ViewportSpec]:
    vps = default_viewports(x.shape[1]) if viewports is None else list(viewports)
    if not vps:
        raise ValueError("viewport set is empty")
    return vps


def _check_pair(x, x_hat) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(x, dtype=np.float64)
    b = np.asarray(x_hat, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    mse = float(np.mean((a - b) ** 2))
    if mse == 0:
        return PSNR_CAP_DB
    return min(PSNR_CAP_DB, 10 * math.log10(255.0 ** 2 / mse))


def vpsnr(x, x_hat, viewports: Sequence[ViewportSpec] | None = None) -> float:
    """Mean PSNR (dB) over viewports; identical viewports score 100 dB."""
    a, b = _check_pair(x, x_hat)
    vals = [psnr(extract_viewport(a, vp), extract_viewport(b, vp)) for vp in _viewports(viewports, a)]
    return float(np.mean(vals))


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    k = np.arange(size) - (size - 1) / 2
    g = np.exp(-(k ** 2) / (2 * sigma ** 2))
    return g / g.sum()


def luminance(img: np.ndarray) -> np.ndarray:
    return np.tensordot(BT601, np.asarray(img, dtype=np.float64), axes=(0, 0))


def ssim(a: np.ndarray, b: np.ndarray, data_range: float = 255.0) -> float:
    """SSIM of two 2-D images: 11x11 Gaussian window (sigma 1.5), valid region only."""
    win = _gaussian_window()
    if min(a.shape) < win.size:
        raise ValueError(f"image {a.shape} smaller than the {win.size}x{win.size} SSIM window")
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    half = win.size // 2

    def blur(img):
        out = correlate1d(correlate1d(img, win, axis=0, mode="constant"), win, axis=1, mode="constant")
        return out[half:-half, half:-half]

    mu_a, mu_b = blur(a), blur(b)
    saa = blur(a * a) - mu_a ** 2
    sbb = blur(b * b) - mu_b ** 2
    sab = blur(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * sab + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (saa + sbb + c2)
    return float(np.mean(num / den))


def vssim(x, x_hat, viewports: Sequence[ViewportSpec] | None = None) -> float:
    """Mean luminance SSIM over viewports."""
    a, b = _check_pair(x, x_hat)
    vals = []
    for vp in _viewports(viewports, a):
        va, vb = luminance(extract_viewport(a, vp)), luminance(extract_viewport(b, vp))
        vals.append(ssim(va, vb))
    return float(np.mean(vals))


class FeatureExtractor(Module):
    """Frozen three-block conv network standing in for VGG conv3 features.

    Each block is ``conv3x3 -> ReLU``; blocks two and three have stride 2.
    Weights come from a fixed seed unless loaded from a checkpoint.
    """

    def __init__(self, seed: int = 1234, widths: tuple[int, int, int] = (16, 32, 64)):
        rng = np.random.default_rng(seed)
        self.blocks = [
            Conv2d(3, widths[0], stride=1, rng=rng),
            Conv2d(widths[0], widths[1], stride=2, rng=rng),
            Conv2d(widths[1], widths[2], stride=2, rng=rng),
        ]
        for p in self.parameters():
            p.requires_grad = False

    def forward(self, x) -> T.Tensor:
        arr = np.asarray(x.data if isinstance(x, T.Tensor) else x, dtype=np.float32)
        h = T.Tensor(arr[None] if arr.ndim == 3 else arr)
        with T.no_grad():
            for conv in self.blocks:
                h = T.relu(conv(h))
        return h

    @classmethod
    def from_checkpoint(cls, path) -> FeatureExtractor:
        from .codec import load_checkpoint

        tensors, meta = load_checkpoint(path)
        widths = tuple(meta.get("widths", (16, 32, 64)))
        ext = cls(widths=widths)
        ext.load_tensors(tensors)
        for p in ext.named_tensors().values():
            p.requires_grad = False
        return ext


_DEFAULT_EXTRACTOR: FeatureExtractor | None = None


def default_extractor() -> FeatureExtractor:
    global _DEFAULT_EXTRACTOR
    if _DEFAULT_EXTRACTOR is None:
        _DEFAULT_EXTRACTOR = FeatureExtractor()
    return _DEFAULT_EXTRACTOR


def perceptual_loss(x, x_hat, extractor: FeatureExtractor | None = None) -> float:
    """Mean squared difference of third-block features; inputs on the [-1, 1] scale."""
    ext = extractor if extractor is not None else default_extractor()
    a, b = _check_pair(np.asarray(x.data if isinstance(x, T.Tensor) else x),
                       np.asarray(x_hat.data if isinstance(x_hat, T.Tensor) else x_hat))
    fa, fb = ext(a).data.astype(np.float64), ext(b).data.astype(np.float64)
    return float(np.mean((fa - fb) ** 2))
