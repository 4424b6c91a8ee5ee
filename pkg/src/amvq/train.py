"""Reconstruction + VQ objective, PatchGAN adversarial loss and the training loop."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .activation_map import compute_map, raw_mask
from .channel import HEADER_BITS, index_bits
from .codec import CodecConfig, FeatureGrid, features_to_rows, rows_to_features
from .nn import Adam, BatchNorm2d, Conv2d, Module, frozen
from .pipeline import AMVQModel
from .tensor import Tensor
from .vq import Codebook, codebook_update, init_codebook, quantize_nearest, vq_terms

LOGIT_CLAMP = 30.0


class TrainingError(RuntimeError):
    """Training produced a non-finite loss."""


@dataclass(frozen=True)
class TrainConfig:
    beta: float = 0.25
    lam: float = 0.8
    lr_generator: float = 1e-3
    lr_discriminator: float = 4e-4
    steps: int = 300
    batch_size: int = 1
    seed: int = 0
    threshold: float = 0.3
    invert_threshold: bool = False
    gan_enabled: bool = True
    gan_start_step: int = 100
    codebook_mode: str = "loss-gradient"
    ema_decay: float = 0.99
    log_every: int = 1

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lambda must be non-negative")
        if self.beta < 0:
            raise ValueError("beta must be non-negative")
        if self.lr_generator <= 0 or self.lr_discriminator <= 0:
            raise ValueError("learning rates must be positive")
        if self.codebook_mode not in ("loss-gradient", "ema"):
            raise ValueError(f"unknown codebook mode {self.codebook_mode!r}")
        if self.batch_size < 1 or self.steps < 0:
            raise ValueError("batch_size must be >= 1 and steps >= 0")


class Discriminator(Module):
    """PatchGAN: conv+act stem, three conv/BN/act groups, 1-channel conv head."""

    def __init__(self, in_channels: int = 3, width: int = 16, seed: int = 3):
        rng = np.random.default_rng(seed)
        self.stem = Conv2d(in_channels, width, 4, stride=2, padding=1, rng=rng)
        widths = [width, width * 2, width * 4, width * 8]
        strides = [2, 2, 1]
        self.convs = [Conv2d(widths[i], widths[i + 1], 4, stride=strides[i], padding=1, rng=rng) for i in range(3)]
        self.norms = [BatchNorm2d(widths[i + 1]) for i in range(3)]
        self.head = Conv2d(widths[-1], 1, 4, stride=1, padding=1, rng=rng)

    def forward(self, x: Tensor) -> Tensor:
        h = T.leaky_relu(self.stem(x), 0.2)
        for conv, bn in zip(self.convs, self.norms):
            h = T.leaky_relu(bn(conv(h)), 0.2)
        return self.head(h)


def _rows(t) -> Tensor:
    if isinstance(t, FeatureGrid):
        return t.values
    return t if isinstance(t, Tensor) else Tensor(t)


def rec_loss(x, x_hat, f, quantized, beta: float = 0.25) -> Tensor:
    """``||x - x_hat||^2`` plus the codebook and beta-weighted commitment terms."""
    x, x_hat = _rows(x), _rows(x_hat)
    if x.shape != x_hat.shape:
        raise T.ShapeError(f"rec_loss: image shapes {x.shape} and {x_hat.shape} differ")
    codebook_term, commitment = vq_terms(_rows(f), _rows(quantized))
    return T.add(T.sqdist(x, x_hat), T.add(codebook_term, T.mul(beta, commitment)))


def _logits(disc: Discriminator, x: Tensor) -> Tensor:
    return T.clip(disc(x), -LOGIT_CLAMP, LOGIT_CLAMP)


def discriminator_loss(disc: Discriminator, x, x_hat) -> Tensor:
    """``-mean[log G(x) + log(1 - G(x_hat))]``; ``x_hat`` is detached."""
    real = _logits(disc, _rows(x))
    fake = _logits(disc, T.stop_gradient(_rows(x_hat)))
    return T.add(T.mean(T.softplus(T.neg(real))), T.mean(T.softplus(fake)))


def generator_loss(disc: Discriminator, x_hat) -> Tensor:
    """Non-saturating ``-mean[log G(x_hat)]`` with the discriminator held fixed."""
    with frozen(disc):
        fake = _logits(disc, _rows(x_hat))
    return T.mean(T.softplus(T.neg(fake)))


def gan_loss(x, x_hat, disc: Discriminator) -> tuple[Tensor, Tensor]:
    return discriminator_loss(disc, x, x_hat), generator_loss(disc, x_hat)


def total_objective(rec, gen_gan, lam: float = 0.8):
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    return rec + lam * gen_gan


def _batch(images) -> Tensor:
    arr = np.asarray(images, dtype=np.float32)
    return Tensor(arr[None] if arr.ndim == 3 else arr)


class Trainer:
    """Alternating generator / discriminator updates on an :class:`AMVQModel`."""

    def __init__(self, model: AMVQModel, cfg: TrainConfig, disc: Discriminator | None = None):
        self.model = model
        self.cfg = cfg
        self.disc = disc if disc is not None else Discriminator(model.config.input_channels, seed=cfg.seed + 3)
        self.codebook = Tensor(model.codebook.vectors, requires_grad=cfg.codebook_mode == "loss-gradient")
        gen_params = model.encoder.parameters() + model.decoder.parameters()
        if cfg.codebook_mode == "loss-gradient":
            gen_params.append(self.codebook)
        self.opt_g = Adam(gen_params, cfg.lr_generator)
        self.opt_d = Adam(self.disc.parameters(), cfg.lr_discriminator)
        self.step_count = 0
        self.codebook_initialized = False
        self.rng = np.random.default_rng(cfg.seed)

    @property
    def codec_config(self) -> CodecConfig:
        return self.model.config

    def _fusion_mask(self, rows: np.ndarray, n: int, h: int, w: int) -> tuple[np.ndarray, np.ndarray]:
        cb = Codebook(self.codebook.data)
        m = h * w
        indices = np.empty(n * m, dtype=np.int64)
        is_raw = np.empty(n * m, dtype=bool)
        for i in range(n):
            grid = FeatureGrid(Tensor(rows[i * m:(i + 1) * m]), h, w)
            result = quantize_nearest(grid, cb)
            amap = compute_map(grid, result, self.cfg.beta)
            indices[i * m:(i + 1) * m] = result.indices
            is_raw[i * m:(i + 1) * m] = raw_mask(amap, self.cfg.threshold, self.cfg.invert_threshold)
        return indices, is_raw

    def _bpp(self, is_raw: np.ndarray, n: int) -> float:
        cfg = self.codec_config
        m = cfg.num_positions
        n_raw = is_raw.sum()
        bits = n * (HEADER_BITS + m) + (n * m - n_raw) * index_bits(self.model.codebook.K) \
            + n_raw * cfg.feature_channels * 16
        return float(bits) / (n * cfg.image_height * cfg.image_width)

    def train_step(self, images) -> dict:
        cfg = self.cfg
        x = _batch(images)
        enc, dec = self.model.encoder, self.model.decoder
        enc.train()
        dec.train()
        self.disc.train()

        feats = enc(x)
        n, _, h, w = feats.shape
        f = features_to_rows(feats)
        if not self.codebook_initialized:
            if self.step_count == 0:
                self.codebook.data = init_codebook(f.data, self.model.codebook.K, self.rng).vectors
            self.codebook_initialized = True
        indices, is_raw = self._fusion_mask(f.data, n, h, w)

        z = T.index_select(self.codebook, indices)
        mixed = np.where(is_raw[:, None], f.data, z.data)
        f_hat = T.straight_through(f, mixed)
        x_hat = dec(rows_to_features(f_hat, n, h, w))

        distortion = T.sqdist(x, x_hat)
        codebook_term, commitment = vq_terms(f, z)
        rec = T.add(distortion, T.add(codebook_term, T.mul(cfg.beta, commitment)))
        gan_active = cfg.gan_enabled and self.step_count >= cfg.gan_start_step
        if gan_active:
            gen = generator_loss(self.disc, x_hat)
            total = total_objective(rec, gen, cfg.lam)
        else:
            gen = None
            total = rec
        if not np.isfinite(total.data).all():
            raise TrainingError(f"non-finite generator loss at step {self.step_count}: "
                                f"rec={rec.item()}, gan_g={gen.item() if gen is not None else 0.0}")

        self.opt_g.zero_grad()
        T.backward(total)
        self.opt_g.step()
        if cfg.codebook_mode == "ema":
            cb = codebook_update(Codebook(self.codebook.data, *self._ema_state()),
                                 [(f.data, indices)], mode="ema", decay=cfg.ema_decay)
            self.codebook.data = cb.vectors
            self._ema = (cb.ema_count, cb.ema_sum)
        self.model.codebook = Codebook(self.codebook.data)

        gan_d = 0.0
        if gan_active:
            d_loss = discriminator_loss(self.disc, x, x_hat.detach())
            if not np.isfinite(d_loss.data).all():
                raise TrainingError(f"non-finite discriminator loss at step {self.step_count}")
            self.opt_d.zero_grad()
            T.backward(d_loss)
            self.opt_d.step()
            gan_d = d_loss.item()

        gan_g = gen.item() if gen is not None else 0.0
        log = {
            "step": self.step_count,
            "rec": rec.item(),
            "distortion": distortion.item(),
            "mse": distortion.item() / x.size,
            "vq": codebook_term.item(),
            "commit": commitment.item(),
            "gan_g": gan_g,
            "gan_d": gan_d,
            "total": total.item(),
            "raw_fraction": float(is_raw.mean()),
            "bpp": self._bpp(is_raw, n),
        }
        self.step_count += 1
        return log

    def _ema_state(self):
        return getattr(self, "_ema", (None, None))

    def fit(self, images, steps: int | None = None, log_path=None) -> list[dict]:
        """Run ``steps`` train steps over ``images``, cycling in a seeded order."""
        images = [np.asarray(im, dtype=np.float32) for im in images]
        steps = self.cfg.steps if steps is None else steps
        logs = []
        fh = open(log_path, "w") if log_path else None
        try:
            order: list[int] = []
            for _ in range(steps):
                batch = []
                while len(batch) < min(self.cfg.batch_size, len(images)):
                    if not order:
                        order = list(self.rng.permutation(len(images)))
                    batch.append(images[order.pop()])
                rec = self.train_step(np.stack(batch))
                logs.append(rec)
                if fh and rec["step"] % self.cfg.log_every == 0:
                    fh.write(json.dumps(_log_record(rec), sort_keys=True) + "\n")
        finally:
            if fh:
                fh.close()
        self.model.eval()
        return logs


def _log_record(rec: dict) -> dict:
    return {k: (v if isinstance(v, int) or math.isfinite(v) else None) for k, v in rec.items()}
