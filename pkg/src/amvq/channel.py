"""Bitstream format, modulation, fading channel and rate accounting.

Wire format (version 1)::

    header  16 bytes  "AMVQ" | version u8 | M u32 | L_dim u16 | K u32 | raw_precision u8
                      (multi-byte fields little-endian)
    body    per position: flag bit (0 = INDEX, 1 = RAW), then
              INDEX: ceil(log2 K) bits of the index, most significant first
              RAW:   L_dim floats of raw_precision bits, each as its
                     little-endian bytes
    bits are packed MSB-first into bytes; the final byte is zero-padded.

``Bitstream.nbits`` counts header and body bits, excluding the pad.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np

from .activation_map import HybridSymbolStream

MAGIC = b"AMVQ"
VERSION = 1
HEADER_FORMAT = "<4sBIHIB"
HEADER_BITS = 8 * struct.calcsize(HEADER_FORMAT)
_FLOAT_DTYPES = {16: "<f2", 32: "<f4"}


class BitstreamError(ValueError):
    """A bitstream that cannot be parsed."""


@dataclass(frozen=True)
class Bitstream:
    data: bytes
    nbits: int

    @classmethod
    def from_bits(cls, bits: np.ndarray) -> Bitstream:
        bits = np.asarray(bits, dtype=np.uint8)
        return cls(np.packbits(bits).tobytes(), int(bits.size))

    def bits(self) -> np.ndarray:
        return np.unpackbits(np.frombuffer(self.data, dtype=np.uint8))[: self.nbits]

    def to_file(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(self.data)

    @classmethod
    def from_file(cls, path) -> Bitstream:
        with open(path, "rb") as fh:
            data = fh.read()
        bits = np.unpackbits(np.frombuffer(data, dtype=np.uint8))
        try:
            nbits = _parse_length(bits)
        except BitstreamError:
            # damaged in transit; a lenient parse ignores the trailing pad
            nbits = bits.size
        return cls(data, nbits)


def index_bits(K: int) -> int:
    return max(1, math.ceil(math.log2(K))) if K > 1 else 0


def _check_header_fields(M: int, L_dim: int, K: int, precision: int) -> None:
    if K >= 2 ** 32:
        raise BitstreamError(f"codebook size K={K} unsupported (must be < 2^32)")
    if M >= 2 ** 32 or L_dim >= 2 ** 16:
        raise BitstreamError("stream dimensions exceed header field widths")
    if precision not in _FLOAT_DTYPES:
        raise BitstreamError(f"raw precision must be 16 or 32, got {precision}")


def _uint_bits(values: np.ndarray, width: int) -> np.ndarray:
    shifts = np.arange(width - 1, -1, -1, dtype=np.int64)
    return ((np.asarray(values, dtype=np.int64)[:, None] >> shifts) & 1).astype(np.uint8)


def stream_bit_cost(stream: HybridSymbolStream, raw_precision: int = 16) -> int:
    """Total serialized bits (header + body) computed from the format alone."""
    n_raw = int(stream.is_raw.sum())
    n_idx = stream.M - n_raw
    return HEADER_BITS + stream.M + n_idx * index_bits(stream.K) + n_raw * stream.L_dim * raw_precision


def serialize(stream: HybridSymbolStream, raw_precision: int = 16) -> Bitstream:
    _check_header_fields(stream.M, stream.L_dim, stream.K, raw_precision)
    header = struct.pack(HEADER_FORMAT, MAGIC, VERSION, stream.M, stream.L_dim, stream.K, raw_precision)
    nb = index_bits(stream.K)
    idx_bits = _uint_bits(stream.indices, nb)
    raw_bytes = np.ascontiguousarray(stream.raw.astype(_FLOAT_DTYPES[raw_precision])).view(np.uint8)
    raw_bits = np.unpackbits(raw_bytes.reshape(stream.M, -1), axis=1)
    parts = [np.unpackbits(np.frombuffer(header, dtype=np.uint8))]
    for m in range(stream.M):
        if stream.is_raw[m]:
            parts.append(np.ones(1, np.uint8))
            parts.append(raw_bits[m])
        else:
            parts.append(np.zeros(1, np.uint8))
            parts.append(idx_bits[m])
    bits = np.concatenate(parts)
    return Bitstream.from_bits(bits)


@dataclass(frozen=True)
class StreamHeader:
    M: int
    L_dim: int
    K: int
    raw_precision: int


def _read_header(bits: np.ndarray) -> tuple[StreamHeader, int]:
    if bits.size < HEADER_BITS:
        raise BitstreamError("bitstream shorter than its header")
    raw = np.packbits(bits[:HEADER_BITS]).tobytes()
    magic, version, M, L_dim, K, prec = struct.unpack(HEADER_FORMAT, raw)
    if magic != MAGIC:
        raise BitstreamError(f"bad magic {magic!r}")
    if version != VERSION:
        raise BitstreamError(f"unsupported bitstream version {version}")
    if prec not in _FLOAT_DTYPES or K < 2:
        raise BitstreamError(f"invalid header fields K={K}, raw_precision={prec}")
    return StreamHeader(M, L_dim, K, prec), HEADER_BITS


def _parse_length(bits: np.ndarray) -> int:
    header, pos = _read_header(bits)
    nb = index_bits(header.K)
    raw_len = header.L_dim * header.raw_precision
    for _ in range(header.M):
        if pos >= bits.size:
            raise BitstreamError("bitstream truncated")
        pos += 1 + (raw_len if bits[pos] else nb)
    if pos > bits.size:
        raise BitstreamError("bitstream truncated")
    return pos


def deserialize(bitstream: Bitstream, expected: StreamHeader | None = None,
                lenient: bool = False) -> HybridSymbolStream:
    """Parse a bitstream back to its symbol stream.

    Strict mode rejects anything malformed. Lenient mode is for streams that
    crossed a noisy channel: a damaged header is replaced by ``expected``,
    missing body bits read as zero, non-finite raw values become zero, and
    trailing bits are ignored. Indices >= K wrap modulo K in both modes.
    """
    bits = bitstream.bits()
    try:
        header, pos = _read_header(bits)
        if expected is not None and header != expected:
            raise BitstreamError(f"header {header} does not match expected {expected}")
    except BitstreamError:
        if not lenient or expected is None:
            raise
        header, pos = expected, HEADER_BITS

    nb = index_bits(header.K)
    dtype = _FLOAT_DTYPES[header.raw_precision]
    raw_len = header.L_dim * header.raw_precision
    weights = 1 << np.arange(nb - 1, -1, -1, dtype=np.int64)

    is_raw = np.zeros(header.M, dtype=bool)
    indices = np.zeros(header.M, dtype=np.int64)
    raw = np.zeros((header.M, header.L_dim), dtype=np.float32)

    def take(n: int) -> np.ndarray:
        nonlocal pos
        chunk = bits[pos:pos + n]
        pos += n
        if chunk.size < n:
            if not lenient:
                raise BitstreamError("bitstream truncated")
            chunk = np.concatenate([chunk, np.zeros(n - chunk.size, np.uint8)])
        return chunk

    for m in range(header.M):
        if take(1)[0]:
            is_raw[m] = True
            vals = np.packbits(take(raw_len)).view(dtype).astype(np.float32)
            if not np.all(np.isfinite(vals)):
                if not lenient:
                    raise BitstreamError(f"non-finite raw value at position {m}")
                vals = np.where(np.isfinite(vals), vals, 0).astype(np.float32)
            raw[m] = vals
        else:
            indices[m] = int(take(nb) @ weights) % header.K if nb else 0
    if not lenient and pos != bits.size:
        raise BitstreamError(f"{bits.size - pos} unexpected trailing bits")
    return HybridSymbolStream(is_raw, indices, raw, header.K)


def bits_per_pixel(bitstream: Bitstream, image_height: int, image_width: int) -> float:
    if image_height <= 0 or image_width <= 0:
        raise ValueError("image dimensions must be positive")
    return bitstream.nbits / (image_height * image_width)


# ---------------------------------------------------------------- physical layer


@dataclass(frozen=True)
class ChannelConfig:
    kind: str = "noiseless"
    snr_db: float = 20.0
    modulation: str = "bpsk"
    seed: int = 0
    coder: str = "passthrough"

    def __post_init__(self):
        if self.kind not in ("noiseless", "awgn", "rayleigh"):
            raise ValueError(f"unknown channel kind {self.kind!r}")
        if self.modulation not in ("bpsk", "qpsk"):
            raise ValueError(f"unknown modulation {self.modulation!r}")
        if self.coder not in ("passthrough", "repetition-3"):
            raise ValueError(f"unknown channel coder {self.coder!r}")
        if not math.isfinite(self.snr_db):
            raise ValueError("snr_db must be finite")

    @property
    def noise_variance(self) -> float:
        """sigma^2 for unit signal power."""
        return 1.0 / 10 ** (self.snr_db / 10)


def channel_encode(bits: np.ndarray, coder: str) -> np.ndarray:
    bits = np.asarray(bits, dtype=np.uint8)
    if coder == "passthrough":
        return bits
    if coder == "repetition-3":
        return np.repeat(bits, 3)
    raise ValueError(f"unknown channel coder {coder!r}")


def channel_decode(bits: np.ndarray, coder: str, nbits: int) -> np.ndarray:
    if coder == "passthrough":
        return bits[:nbits].astype(np.uint8)
    if coder == "repetition-3":
        votes = bits[: 3 * nbits].reshape(nbits, 3).sum(axis=1)
        return (votes >= 2).astype(np.uint8)
    raise ValueError(f"unknown channel coder {coder!r}")


_SQRT_HALF = 1 / math.sqrt(2)


def modulate(bits: np.ndarray, modulation: str = "bpsk") -> tuple[np.ndarray, int]:
    """Unit-power symbols and the number of zero pad bits appended.

    BPSK maps 0 -> +1, 1 -> -1. QPSK is Gray-mapped with the first bit on the
    in-phase and the second on the quadrature rail.
    """
    bits = np.asarray(bits, dtype=np.uint8)
    if modulation == "bpsk":
        return (1.0 - 2.0 * bits).astype(np.complex128), 0
    if modulation == "qpsk":
        pad = bits.size % 2
        if pad:
            bits = np.concatenate([bits, np.zeros(1, np.uint8)])
        pairs = bits.reshape(-1, 2).astype(np.float64)
        sym = ((1 - 2 * pairs[:, 0]) + 1j * (1 - 2 * pairs[:, 1])) * _SQRT_HALF
        return sym, pad
    raise ValueError(f"unknown modulation {modulation!r}")


def demodulate(symbols: np.ndarray, modulation: str = "bpsk") -> np.ndarray:
    if modulation == "bpsk":
        return (symbols.real < 0).astype(np.uint8)
    if modulation == "qpsk":
        return np.stack([symbols.real < 0, symbols.imag < 0], axis=1).reshape(-1).astype(np.uint8)
    raise ValueError(f"unknown modulation {modulation!r}")


def apply_channel(s: np.ndarray, cfg: ChannelConfig,
                  rng: np.random.Generator | None = None) -> tuple[np.ndarray, np.ndarray]:
    """``r = h * s + n`` with perfect CSI ``h`` returned alongside.

    Rayleigh draws ``h ~ CN(0, 1)`` per symbol; AWGN and noiseless use
    ``h = 1``. Noise is ``CN(0, sigma^2)`` except on the noiseless channel.
    """
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    s = np.asarray(s, dtype=np.complex128)
    n_sym = s.size
    if cfg.kind == "noiseless":
        return s.copy(), np.ones(n_sym, dtype=np.complex128)
    if cfg.kind == "rayleigh":
        h = (rng.standard_normal(n_sym) + 1j * rng.standard_normal(n_sym)) * _SQRT_HALF
    else:
        h = np.ones(n_sym, dtype=np.complex128)
    sigma = math.sqrt(cfg.noise_variance / 2)
    n = sigma * (rng.standard_normal(n_sym) + 1j * rng.standard_normal(n_sym))
    return h * s + n, h


def equalize_demodulate(r: np.ndarray, h: np.ndarray, cfg: ChannelConfig, nbits: int) -> np.ndarray:
    """Zero-forcing equalization, hard decisions and channel decoding.

    ``nbits`` is the number of information bits before channel coding.
    Where ``|h| < 1e-12`` the unequalized sample decides the bit.
    """
    r = np.asarray(r, dtype=np.complex128)
    h = np.asarray(h, dtype=np.complex128)
    if r.shape != h.shape:
        raise ValueError(f"received length {r.shape} does not match CSI length {h.shape}")
    dead = np.abs(h) < 1e-12
    s_hat = np.where(dead, r, r / np.where(dead, 1, h))
    coded = demodulate(s_hat, cfg.modulation)
    return channel_decode(coded, cfg.coder, nbits)


def transmit_bits(bits: np.ndarray, cfg: ChannelConfig,
                  rng: np.random.Generator | None = None) -> np.ndarray:
    bits = np.asarray(bits, dtype=np.uint8)
    coded = channel_encode(bits, cfg.coder)
    s, _ = modulate(coded, cfg.modulation)
    r, h = apply_channel(s, cfg, rng)
    return equalize_demodulate(r, h, cfg, bits.size)


def transmit(bitstream: Bitstream, cfg: ChannelConfig,
             rng: np.random.Generator | None = None) -> Bitstream:
    """Send a bitstream through the configured channel; returns the received bits."""
    return Bitstream.from_bits(transmit_bits(bitstream.bits(), cfg, rng))


def header_of(stream: HybridSymbolStream, raw_precision: int = 16) -> StreamHeader:
    return StreamHeader(stream.M, stream.L_dim, stream.K, raw_precision)


def rayleigh_bpsk_ber(snr_db: float) -> float:
    g = 10 ** (snr_db / 10)
    return 0.5 * (1 - math.sqrt(g / (1 + g)))


def awgn_bpsk_ber(snr_db: float) -> float:
    g = 10 ** (snr_db / 10)
    return 0.5 * math.erfc(math.sqrt(g))
