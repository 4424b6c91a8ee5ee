"""Quantization-distortion activation maps and index/raw feature fusion.

The map is built Grad-CAM style from the gradient of the VQ loss with
respect to the feature grid: per-channel weights are the spatial mean of
that gradient, the map is the ReLU of the weighted channel sum. Positions
whose normalized map value is at most ``T`` are sent as codebook indices,
the rest as raw feature vectors.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .codec import FeatureGrid
from .tensor import Tensor
from .vq import Codebook, QuantizationResult, feature_digest, vq_loss

DEFAULT_THRESHOLD = 0.3


@dataclass
class ActivationMap:
    values: np.ndarray  # (M,)
    normalized: bool
    height: int
    width: int

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if np.any(self.values < 0):
            raise ValueError("activation map values must be non-negative")


@dataclass
class HybridSymbolStream:
    """Per-position INDEX or RAW symbols.

    ``is_raw[m]`` selects the payload: ``indices[m]`` for INDEX entries,
    ``raw[m]`` for RAW entries. Unused slots hold zeros.
    """

    is_raw: np.ndarray  # (M,) bool
    indices: np.ndarray  # (M,) int64
    raw: np.ndarray  # (M, L_dim) float32
    K: int

    def __post_init__(self):
        self.is_raw = np.asarray(self.is_raw, dtype=bool)
        self.indices = np.asarray(self.indices, dtype=np.int64)
        self.raw = np.asarray(self.raw, dtype=np.float32)
        M = self.is_raw.shape[0]
        if self.indices.shape != (M,) or self.raw.ndim != 2 or self.raw.shape[0] != M:
            raise ValueError("stream fields disagree on the number of positions")
        idx = self.indices[~self.is_raw]
        if idx.size and (idx.min() < 0 or idx.max() >= self.K):
            raise ValueError(f"INDEX payload outside [0, {self.K})")
        if not np.all(np.isfinite(self.raw[self.is_raw])):
            raise ValueError("RAW payload contains non-finite values")

    @property
    def M(self) -> int:
        return self.is_raw.shape[0]

    @property
    def L_dim(self) -> int:
        return self.raw.shape[1]

    @property
    def raw_fraction(self) -> float:
        return float(self.is_raw.mean()) if self.M else 0.0

    def __eq__(self, other) -> bool:
        if not isinstance(other, HybridSymbolStream):
            return NotImplemented
        return (self.K == other.K and self.raw.shape == other.raw.shape
                and np.array_equal(self.is_raw, other.is_raw)
                and np.array_equal(self.indices[~self.is_raw], other.indices[~other.is_raw])
                and np.array_equal(self.raw[self.is_raw], other.raw[other.is_raw]))


def _check_fresh(values: np.ndarray, result: QuantizationResult) -> None:
    if result.source_digest and result.source_digest != feature_digest(values):
        raise ValueError("quantization result was computed from different features")
    if result.indices.shape[0] != values.shape[0]:
        raise ValueError("quantization result has a different number of positions")


def vq_loss_gradient(f: FeatureGrid, result: QuantizationResult, beta: float = 0.25,
                     method: str = "analytic") -> np.ndarray:
    """d(VQ loss)/df as an (L_dim, M) grid.

    ``analytic`` evaluates ``2 * beta * (f_m - z_k)``; ``autodiff`` runs the
    loss through the tensor graph. The two agree to rounding.
    """
    values = f.array()
    _check_fresh(values, result)
    if method == "analytic":
        diff = values.astype(np.float64) - result.quantized.array().astype(np.float64)
        return (2.0 * beta * diff).T
    if method == "autodiff":
        leaf = Tensor(values.astype(np.float64), requires_grad=True)
        loss = vq_loss(leaf, result, beta)
        T.backward(loss)
        return leaf.grad.T
    raise ValueError(f"unknown gradient method {method!r}")


def channel_weights(grad_grid: np.ndarray, absolute: bool = False) -> np.ndarray:
    """Global average pooling of the gradient over positions, one weight per channel."""
    g = np.asarray(grad_grid, dtype=np.float64)
    if g.ndim != 2:
        raise ValueError(f"gradient grid must be (L_dim, M), got shape {g.shape}")
    return (np.abs(g) if absolute else g).mean(axis=1)


def activation_map(f: FeatureGrid, alpha: np.ndarray) -> ActivationMap:
    """ReLU of the alpha-weighted channel sum at each position."""
    alpha = np.asarray(alpha, dtype=np.float64)
    if alpha.shape != (f.L_dim,):
        raise ValueError(f"alpha has shape {alpha.shape}, expected ({f.L_dim},)")
    raw = f.array().astype(np.float64) @ alpha
    return ActivationMap(np.maximum(raw, 0.0), False, f.height, f.width)


def normalize_map(amap: ActivationMap) -> ActivationMap:
    top = amap.values.max() if amap.values.size else 0.0
    values = amap.values / top if top > 0 else amap.values.copy()
    return ActivationMap(values, True, amap.height, amap.width)


def compute_map(f: FeatureGrid, result: QuantizationResult, beta: float = 0.25,
                absolute: bool = False) -> ActivationMap:
    """Normalized activation map of one feature grid."""
    alpha = channel_weights(vq_loss_gradient(f, result, beta), absolute=absolute)
    return normalize_map(activation_map(f, alpha))


def raw_mask(amap: ActivationMap, threshold: float = DEFAULT_THRESHOLD, invert: bool = False) -> np.ndarray:
    """Positions sent RAW: map value above ``threshold`` (or at/below it when inverted)."""
    if not amap.normalized:
        raise ValueError("threshold_fuse needs a normalized activation map")
    if threshold < 0:
        raise ValueError("threshold must be non-negative")
    above = amap.values > threshold
    return ~above if invert else above


def threshold_fuse(f: FeatureGrid, result: QuantizationResult, amap: ActivationMap,
                   threshold: float = DEFAULT_THRESHOLD, invert: bool = False) -> HybridSymbolStream:
    """INDEX where the map is at most ``threshold``, RAW elsewhere."""
    values = f.array()
    _check_fresh(values, result)
    if amap.values.shape[0] != values.shape[0]:
        raise ValueError("activation map and features disagree on the number of positions")
    is_raw = raw_mask(amap, threshold, invert)
    raw = np.where(is_raw[:, None], values, 0).astype(np.float32)
    indices = np.where(is_raw, 0, result.indices)
    return HybridSymbolStream(is_raw, indices, raw, result.K)


def defuse(stream: HybridSymbolStream, cb: Codebook, height: int | None = None,
           width: int | None = None) -> FeatureGrid:
    """Rebuild features: codewords for INDEX entries, payload for RAW entries."""
    if stream.K != cb.K:
        raise ValueError(f"stream K={stream.K} does not match codebook K={cb.K}")
    if stream.L_dim != cb.L_dim:
        raise ValueError(f"stream L_dim={stream.L_dim} does not match codebook L_dim={cb.L_dim}")
    idx = stream.indices
    if idx.size and (idx.min() < 0 or idx.max() >= cb.K):
        raise IndexError("codebook index out of range")
    values = np.where(stream.is_raw[:, None], stream.raw, cb.vectors[idx])
    if height is None:
        height, width = stream.M, 1
    return FeatureGrid(Tensor(values.astype(np.float32)), height, width)
