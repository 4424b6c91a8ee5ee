"""Semantic encoder and decoder at configurable toy scale.

Encoder: ``conv -> ReLU`` stem, then ``num_scales`` downsample blocks of
``2 x ResidualBlock -> strided conv -> ReLU -> conv -> BN`` with a ReLU
between blocks. The last block's BN output is the feature grid.

Decoder: ``conv -> ReLU`` stem, then ``num_scales`` upsample blocks of
``ResidualBlock -> nearest x2 -> conv -> BN -> ReLU``, and a final
``conv -> tanh``.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .nn import BatchNorm2d, Conv2d, Module, ResidualBlock
from .tensor import Tensor


class ConfigError(ValueError):
    """An invalid configuration value."""


@dataclass(frozen=True)
class CodecConfig:
    input_channels: int = 3
    base_channels: int = 16
    num_scales: int = 4
    feature_channels: int = 64
    image_height: int = 64
    image_width: int = 128

    def __post_init__(self):
        if self.num_scales < 1:
            raise ConfigError("num_scales must be >= 1")
        if self.feature_channels < 1 or self.base_channels < 1 or self.input_channels < 1:
            raise ConfigError("channel counts must be >= 1")
        step = 2 ** self.num_scales
        if self.image_height % step or self.image_width % step:
            raise ConfigError(f"image {self.image_height}x{self.image_width} not divisible "
                              f"by 2^num_scales = {step}")

    @property
    def grid_height(self) -> int:
        return self.image_height // 2 ** self.num_scales

    @property
    def grid_width(self) -> int:
        return self.image_width // 2 ** self.num_scales

    @property
    def num_positions(self) -> int:
        return self.grid_height * self.grid_width

    def channel_schedule(self) -> list[int]:
        """Channels at the input of each scale, plus the bottleneck width."""
        widths = [min(self.base_channels * 2 ** s, self.feature_channels) for s in range(self.num_scales)]
        return widths + [self.feature_channels]


@dataclass
class FeatureGrid:
    """Feature vectors at M spatial positions, row-major over (height, width)."""

    values: Tensor  # (M, L)
    height: int
    width: int

    def __post_init__(self):
        if not isinstance(self.values, Tensor):
            self.values = Tensor(self.values)
        if self.values.ndim != 2 or self.values.shape[0] != self.height * self.width:
            raise T.ShapeError(f"FeatureGrid: values {self.values.shape} do not match "
                               f"{self.height}x{self.width} positions")

    @property
    def M(self) -> int:
        return self.values.shape[0]

    @property
    def L_dim(self) -> int:
        return self.values.shape[1]

    def array(self) -> np.ndarray:
        return self.values.data


def features_to_rows(t: Tensor) -> Tensor:
    """NCHW feature map -> (N*H*W, C) rows."""
    n, c, h, w = t.shape
    return T.reshape(T.transpose(t, (0, 2, 3, 1)), (n * h * w, c))


def rows_to_features(rows: Tensor, n: int, h: int, w: int) -> Tensor:
    c = rows.shape[1]
    return T.transpose(T.reshape(rows, (n, h, w, c)), (0, 3, 1, 2))


class Encoder(Module):
    def __init__(self, config: CodecConfig, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.config = config
        widths = config.channel_schedule()
        self.stem = Conv2d(config.input_channels, widths[0], rng=rng)
        self.blocks = [_DownBlock(widths[s], widths[s + 1], rng) for s in range(config.num_scales)]

    def forward(self, x: Tensor) -> Tensor:
        h = T.relu(self.stem(x))
        for i, block in enumerate(self.blocks):
            h = block(h)
            if i < len(self.blocks) - 1:
                h = T.relu(h)
        return h


class _DownBlock(Module):
    def __init__(self, cin: int, cout: int, rng):
        self.res = [ResidualBlock(cin, rng), ResidualBlock(cin, rng)]
        self.down = Conv2d(cin, cout, stride=2, rng=rng)
        self.conv = Conv2d(cout, cout, rng=rng)
        self.bn = BatchNorm2d(cout)

    def forward(self, h: Tensor) -> Tensor:
        for r in self.res:
            h = r(h)
        return self.bn(self.conv(T.relu(self.down(h))))


class Decoder(Module):
    def __init__(self, config: CodecConfig, seed: int = 1):
        rng = np.random.default_rng(seed)
        self.config = config
        widths = config.channel_schedule()[::-1]
        self.stem = Conv2d(config.feature_channels, widths[0], rng=rng)
        self.blocks = [_UpBlock(widths[s], widths[s + 1], rng) for s in range(config.num_scales)]
        self.out = Conv2d(widths[-1], config.input_channels, rng=rng)

    def forward(self, f: Tensor) -> Tensor:
        h = T.relu(self.stem(f))
        for block in self.blocks:
            h = block(h)
        return T.tanh(self.out(h))


class _UpBlock(Module):
    def __init__(self, cin: int, cout: int, rng):
        self.res = ResidualBlock(cin, rng)
        self.conv = Conv2d(cin, cout, rng=rng)
        self.bn = BatchNorm2d(cout)

    def forward(self, h: Tensor) -> Tensor:
        h = T.upsample_nearest(self.res(h), 2)
        return T.relu(self.bn(self.conv(h)))


def _image_batch(x, config: CodecConfig) -> Tensor:
    x = x if isinstance(x, Tensor) else Tensor(x)
    if x.ndim == 3:
        x = T.reshape(x, (1,) + x.shape)
    if x.ndim != 4 or x.shape[1] != config.input_channels:
        raise T.ShapeError(f"expected a [{config.input_channels}xHxW] image, got {x.shape}")
    step = 2 ** config.num_scales
    if x.shape[2] % step or x.shape[3] % step:
        raise ConfigError(f"image {x.shape[2]}x{x.shape[3]} not divisible by {step}")
    return x


def encode(x, encoder: Encoder) -> FeatureGrid:
    """Encode one [C x H x W] image in [-1, 1] to its feature grid."""
    xb = _image_batch(x, encoder.config)
    if xb.shape[0] != 1:
        raise T.ShapeError("encode takes a single image; use Encoder.forward for batches")
    feats = encoder(xb)
    _, _, h, w = feats.shape
    return FeatureGrid(features_to_rows(feats), h, w)


def decode(f_hat: FeatureGrid, decoder: Decoder) -> Tensor:
    """Decode one feature grid to a [C x H x W] image in [-1, 1]."""
    cfg = decoder.config
    if (f_hat.height, f_hat.width) != (cfg.grid_height, cfg.grid_width) or f_hat.L_dim != cfg.feature_channels:
        raise T.ShapeError(f"decode: grid {f_hat.height}x{f_hat.width}x{f_hat.L_dim} does not match "
                           f"config {cfg.grid_height}x{cfg.grid_width}x{cfg.feature_channels}")
    img = decoder(rows_to_features(f_hat.values, 1, f_hat.height, f_hat.width))
    return T.reshape(img, img.shape[1:])


def residual_block(t: Tensor, block: ResidualBlock) -> Tensor:
    return block(t)


def save_checkpoint(path, tensors: dict[str, Tensor], meta: dict) -> None:
    """Write ``<path>`` (concatenated tensor containers) and ``<path>.json`` (index)."""
    path = Path(path)
    index = []
    offset = 0
    with open(path, "wb") as fh:
        for name, t in tensors.items():
            nbytes = T.write_tensor(fh, t)
            index.append({"name": name, "offset": offset, "shape": list(t.shape)})
            offset += nbytes
    doc = dict(meta)
    doc["tensors"] = index
    Path(str(path) + ".json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def load_checkpoint(path) -> tuple[dict[str, Tensor], dict]:
    path = Path(path)
    meta = json.loads(Path(str(path) + ".json").read_text())
    tensors: dict[str, Tensor] = {}
    with open(path, "rb") as fh:
        for entry in meta["tensors"]:
            fh.seek(entry["offset"])
            tensors[entry["name"]] = T.read_tensor(fh)
    return tensors, meta


def save_codec(path, encoder: Encoder, decoder: Decoder) -> None:
    tensors = {}
    tensors.update(encoder.named_tensors("encoder."))
    tensors.update(decoder.named_tensors("decoder."))
    save_checkpoint(path, tensors, {"codec": asdict(encoder.config)})


def load_codec(path) -> tuple[Encoder, Decoder]:
    tensors, meta = load_checkpoint(path)
    config = CodecConfig(**meta["codec"])
    enc, dec = Encoder(config), Decoder(config)
    enc.load_tensors(tensors, "encoder.")
    dec.load_tensors(tensors, "decoder.")
    return enc, dec
