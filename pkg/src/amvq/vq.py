"""Codebook, nearest-codeword quantization and the VQ / commitment loss."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .codec import FeatureGrid
from .tensor import Tensor

CODEBOOK_VERSION = 1


@dataclass
class Codebook:
    vectors: np.ndarray  # (K, L_dim)
    ema_count: np.ndarray | None = field(default=None, repr=False)
    ema_sum: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float32)
        if self.vectors.ndim != 2:
            raise ValueError(f"codebook must be a K x L matrix, got shape {self.vectors.shape}")
        if self.K < 2:
            raise ValueError(f"codebook needs at least 2 codewords, got {self.K}")
        if not np.all(np.isfinite(self.vectors)):
            raise ValueError("codebook contains non-finite values")

    @property
    def K(self) -> int:
        return self.vectors.shape[0]

    @property
    def L_dim(self) -> int:
        return self.vectors.shape[1]

    def to_bytes(self) -> bytes:
        return np.ascontiguousarray(self.vectors, dtype="<f4").tobytes()


@dataclass
class QuantizationResult:
    indices: np.ndarray  # (M,) int64
    quantized: FeatureGrid
    vq_loss: float
    commitment_loss: float
    K: int = 0
    source_digest: str = field(default="", repr=False)


def _features(f) -> tuple[np.ndarray, int, int]:
    if isinstance(f, FeatureGrid):
        return f.array(), f.height, f.width
    arr = np.asarray(f.data if isinstance(f, Tensor) else f)
    if arr.ndim != 2:
        raise ValueError(f"expected an (M, L) feature array, got shape {arr.shape}")
    return arr, arr.shape[0], 1


def feature_digest(values: np.ndarray) -> str:
    arr = np.ascontiguousarray(values, dtype=np.float32)
    return hashlib.blake2b(arr.tobytes() + str(arr.shape).encode(), digest_size=16).hexdigest()


def nearest_indices(values: np.ndarray, codebook: np.ndarray) -> np.ndarray:
    """argmin_k ||f_m - z_k||^2 per row, ties to the lowest index.

    The expanded-form distances pick candidates; every candidate within
    rounding distance of the row minimum is then re-scored with direct
    differences so the result does not depend on cancellation error.
    """
    f = np.asarray(values, dtype=np.float64)
    z = np.asarray(codebook, dtype=np.float64)
    if z.shape[0] == 0:
        raise ValueError("empty codebook")
    if f.shape[1] != z.shape[1]:
        raise ValueError(f"feature dim {f.shape[1]} != codebook dim {z.shape[1]}")
    fz = f @ z.T
    f2 = np.einsum("ij,ij->i", f, f)
    z2 = np.einsum("ij,ij->i", z, z)
    d = f2[:, None] - 2 * fz + z2[None, :]
    dmin = d.min(axis=1)
    scale = f2[:, None] + z2[None, :] + 1.0
    tol = 1e-9 * scale.max(axis=1)
    out = np.empty(f.shape[0], dtype=np.int64)
    for m in range(f.shape[0]):
        cand = np.flatnonzero(d[m] <= dmin[m] + tol[m])
        if cand.size == 1:
            out[m] = cand[0]
            continue
        exact = ((z[cand] - f[m]) ** 2).sum(axis=1)
        out[m] = cand[np.argmin(exact)]
    return out


def quantize_nearest(f, cb: Codebook) -> QuantizationResult:
    """Map each feature vector to its nearest codeword."""
    values, h, w = _features(f)
    if values.shape[1] != cb.L_dim:
        raise ValueError(f"feature dim {values.shape[1]} != codebook dim {cb.L_dim}")
    idx = nearest_indices(values, cb.vectors)
    q = cb.vectors[idx].copy()
    dist = float(np.sum((values.astype(np.float64) - q) ** 2))
    return QuantizationResult(idx, FeatureGrid(Tensor(q), h, w), dist, dist, cb.K, feature_digest(values))


def vq_terms(f: Tensor, z: Tensor) -> tuple[Tensor, Tensor]:
    """(codebook term, commitment term) of the VQ loss for matched rows.

    ``sum ||sg[f] - z||^2`` trains the codebook, ``sum ||sg[z] - f||^2``
    trains the encoder.
    """
    codebook_term = T.sqdist(T.stop_gradient(f), z)
    commitment = T.sqdist(T.stop_gradient(z), f)
    return codebook_term, commitment


def vq_loss(f, result: QuantizationResult, beta: float = 0.25, codebook: Tensor | None = None) -> Tensor:
    """Sum over positions of ``||sg[f_m] - z_k||^2 + beta * ||sg[z_k] - f_m||^2``.

    Pass ``codebook`` as a Tensor to route the first term's gradient to the
    codewords; otherwise the selected codewords are constants.
    """
    if beta < 0:
        raise ValueError("beta must be non-negative")
    fv = f.values if isinstance(f, FeatureGrid) else (f if isinstance(f, Tensor) else Tensor(f))
    z = T.index_select(codebook, result.indices) if codebook is not None else result.quantized.values
    codebook_term, commitment = vq_terms(fv, z)
    return T.add(codebook_term, T.mul(beta, commitment))


def straight_through(f: FeatureGrid, quantized: FeatureGrid) -> FeatureGrid:
    if (f.height, f.width) != (quantized.height, quantized.width):
        raise T.ShapeError("straight_through: grids differ in spatial shape")
    return FeatureGrid(T.straight_through(f.values, quantized.values), f.height, f.width)


def codebook_update(cb: Codebook, batch, mode: str = "loss-gradient", decay: float = 0.99,
                    lr: float = 0.1, eps: float = 1e-5) -> Codebook:
    """One codebook update from a batch of ``(features, indices)`` pairs.

    ``loss-gradient`` takes an SGD step of size ``lr`` on the mean over the
    batch of ``||sg[f_m] - z_k||^2``. ``ema`` keeps exponential moving
    averages of assignment counts and feature sums. Codewords with no
    assignment in the batch are returned unchanged in both modes.
    """
    feats, idx = [], []
    for f, indices in batch:
        values, _, _ = _features(f)
        feats.append(np.asarray(values, dtype=np.float64))
        idx.append(np.asarray(indices, dtype=np.int64))
    f_all = np.concatenate(feats) if feats else np.zeros((0, cb.L_dim))
    i_all = np.concatenate(idx) if idx else np.zeros(0, np.int64)
    if f_all.shape[1] != cb.L_dim:
        raise ValueError(f"feature dim {f_all.shape[1]} != codebook dim {cb.L_dim}")

    counts = np.bincount(i_all, minlength=cb.K).astype(np.float64)
    sums = np.zeros((cb.K, cb.L_dim))
    np.add.at(sums, i_all, f_all)
    used = counts > 0
    z = cb.vectors.astype(np.float64)

    if mode == "loss-gradient":
        n = max(len(i_all), 1)
        grad = 2.0 * (counts[:, None] * z - sums) / n
        new = z.copy()
        new[used] -= lr * grad[used]
        return Codebook(new.astype(np.float32))
    if mode == "ema":
        count = cb.ema_count if cb.ema_count is not None else np.zeros(cb.K)
        total = cb.ema_sum if cb.ema_sum is not None else z * 0.0
        count = np.where(used, decay * count + (1 - decay) * counts, count)
        total = np.where(used[:, None], decay * total + (1 - decay) * sums, total)
        new = z.copy()
        new[used] = total[used] / np.maximum(count[used], eps)[:, None]
        return Codebook(new.astype(np.float32), count, total)
    raise ValueError(f"unknown codebook update mode {mode!r}")


def init_codebook(features: np.ndarray, K: int, rng: np.random.Generator, jitter: float = 1e-2) -> Codebook:
    """k-means++ seeding from a batch of feature vectors.

    With fewer distinct features than ``K`` the remaining codewords are
    features drawn again with Gaussian jitter scaled by the feature spread.
    """
    x = np.asarray(features, dtype=np.float64)
    n = x.shape[0]
    picks = [int(rng.integers(n))]
    d2 = ((x - x[picks[0]]) ** 2).sum(axis=1)
    while len(picks) < min(K, n):
        total = d2.sum()
        if total <= 0:
            break
        nxt = int(rng.choice(n, p=d2 / total))
        picks.append(nxt)
        d2 = np.minimum(d2, ((x - x[nxt]) ** 2).sum(axis=1))
    vectors = x[picks]
    if len(picks) < K:
        spread = float(x.std()) or 1.0
        extra = x[rng.integers(n, size=K - len(picks))]
        extra = extra + rng.normal(scale=jitter * spread, size=extra.shape)
        vectors = np.concatenate([vectors, extra])
    return Codebook(vectors.astype(np.float32))


def save_codebook(path, cb: Codebook) -> None:
    path = Path(path)
    T.save_tensor(path, cb.vectors)
    meta = {"K": cb.K, "L_dim": cb.L_dim, "version": CODEBOOK_VERSION}
    Path(str(path) + ".json").write_text(json.dumps(meta, sort_keys=True) + "\n")


def load_codebook(path) -> Codebook:
    path = Path(path)
    meta = json.loads(Path(str(path) + ".json").read_text())
    if meta.get("version") != CODEBOOK_VERSION:
        raise ValueError(f"unsupported codebook version {meta.get('version')}")
    cb = Codebook(T.load_tensor(path).data)
    if (cb.K, cb.L_dim) != (meta["K"], meta["L_dim"]):
        raise ValueError("codebook metadata does not match stored matrix")
    return cb
