"""Model bundle and the transmit-side / receive-side chain for one image."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .activation_map import HybridSymbolStream, compute_map, defuse, threshold_fuse
from .channel import (Bitstream, ChannelConfig, bits_per_pixel, deserialize, header_of, serialize,
                      transmit)
from .codec import CodecConfig, Decoder, Encoder, FeatureGrid, decode, encode, load_checkpoint, save_checkpoint
from .vq import Codebook, QuantizationResult, quantize_nearest


@dataclass
class AMVQModel:
    encoder: Encoder
    decoder: Decoder
    codebook: Codebook

    @property
    def config(self) -> CodecConfig:
        return self.encoder.config

    @classmethod
    def create(cls, config: CodecConfig, K: int = 1024, seed: int = 0) -> AMVQModel:
        rng = np.random.default_rng(seed + 2)
        cb = Codebook(rng.normal(size=(K, config.feature_channels)).astype(np.float32))
        return cls(Encoder(config, seed), Decoder(config, seed + 1), cb)

    def eval(self) -> AMVQModel:
        self.encoder.eval()
        self.decoder.eval()
        return self

    def save(self, path, extra: dict | None = None, extra_tensors: dict | None = None) -> None:
        tensors = {}
        tensors.update(self.encoder.named_tensors("encoder."))
        tensors.update(self.decoder.named_tensors("decoder."))
        tensors["codebook"] = T.Tensor(self.codebook.vectors)
        if extra_tensors:
            tensors.update(extra_tensors)
        meta = {"codec": asdict(self.config), "codebook": {"K": self.codebook.K, "L_dim": self.codebook.L_dim}}
        meta.update(extra or {})
        save_checkpoint(path, tensors, meta)

    @classmethod
    def load(cls, path) -> AMVQModel:
        tensors, meta = load_checkpoint(path)
        config = CodecConfig(**meta["codec"])
        enc, dec = Encoder(config), Decoder(config)
        enc.load_tensors(tensors, "encoder.")
        dec.load_tensors(tensors, "decoder.")
        return cls(enc, dec, Codebook(tensors["codebook"].data)).eval()


@dataclass
class Analysis:
    grid: FeatureGrid
    result: QuantizationResult
    stream: HybridSymbolStream


def analyse(model: AMVQModel, x: np.ndarray, threshold: float, invert: bool = False,
            beta: float = 0.25, absolute: bool = False) -> Analysis:
    """Encode, quantize and fuse one image (inference mode)."""
    model.eval()
    with T.no_grad():
        grid = encode(x, model.encoder)
    result = quantize_nearest(grid, model.codebook)
    amap = compute_map(grid, result, beta, absolute=absolute)
    stream = threshold_fuse(grid, result, amap, threshold, invert=invert)
    return Analysis(grid, result, stream)


def reconstruct(model: AMVQModel, stream: HybridSymbolStream) -> tuple[FeatureGrid, np.ndarray]:
    cfg = model.config
    f_hat = defuse(stream, model.codebook, cfg.grid_height, cfg.grid_width)
    model.eval()
    with T.no_grad():
        x_hat = decode(f_hat, model.decoder).data
    return f_hat, x_hat


@dataclass
class PipelineResult:
    features: np.ndarray
    f_hat: np.ndarray
    x_hat: np.ndarray
    sent: HybridSymbolStream
    received: HybridSymbolStream
    bitstream: Bitstream
    received_bits: Bitstream
    bpp: float

    @property
    def raw_fraction(self) -> float:
        return self.sent.raw_fraction

    @property
    def feature_distortion(self) -> float:
        return float(np.sum((self.f_hat.astype(np.float64) - self.features) ** 2))


def run_pipeline(model: AMVQModel, x: np.ndarray, threshold: float, channel: ChannelConfig,
                 invert: bool = False, raw_precision: int = 16, beta: float = 0.25,
                 rng: np.random.Generator | None = None) -> PipelineResult:
    """encode -> quantize -> fuse -> serialize -> channel -> deserialize -> defuse -> decode."""
    ana = analyse(model, x, threshold, invert, beta)
    bits = serialize(ana.stream, raw_precision)
    rx_bits = transmit(bits, channel, rng)
    received = deserialize(rx_bits, expected=header_of(ana.stream, raw_precision),
                           lenient=channel.kind != "noiseless")
    f_hat, x_hat = reconstruct(model, received)
    cfg = model.config
    return PipelineResult(
        features=ana.grid.array().astype(np.float64),
        f_hat=f_hat.array(),
        x_hat=x_hat,
        sent=ana.stream,
        received=received,
        bitstream=bits,
        received_bits=rx_bits,
        bpp=bits_per_pixel(bits, cfg.image_height, cfg.image_width),
    )
