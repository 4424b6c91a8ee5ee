import json
import math
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from amvq.activation_map import HybridSymbolStream
from amvq.channel import (HEADER_BITS, Bitstream, BitstreamError, ChannelConfig, StreamHeader,
                          apply_channel, awgn_bpsk_ber, bits_per_pixel, demodulate, deserialize,
                          equalize_demodulate, header_of, index_bits, modulate, rayleigh_bpsk_ber,
                          serialize, stream_bit_cost, transmit, transmit_bits)

GOLDEN = Path(__file__).parent / "golden"


def random_stream(rng, M=None, L=None, K=None, p_raw=None) -> HybridSymbolStream:
    M = M if M is not None else int(rng.integers(1, 40))
    L = L if L is not None else int(rng.integers(1, 17))
    K = K if K is not None else int(rng.integers(2, 5000))
    p = rng.uniform() if p_raw is None else p_raw
    is_raw = rng.uniform(size=M) < p
    idx = np.where(is_raw, 0, rng.integers(0, K, size=M))
    raw = np.where(is_raw[:, None], rng.normal(0, 10, size=(M, L)), 0).astype(np.float16).astype(np.float32)
    return HybridSymbolStream(is_raw, idx, raw, K)


def q_func(x: float) -> float:
    return 0.5 * math.erfc(x / math.sqrt(2))


# ---------------------------------------------------------------- format


def test_header_is_128_bits():
    assert HEADER_BITS == 128


def test_single_index_entry_costs_11_bits():
    s = HybridSymbolStream(np.zeros(1, bool), np.array([1000]), np.zeros((1, 64)), 1024)
    assert serialize(s).nbits - HEADER_BITS == 11


def test_single_raw_entry_costs_1025_bits():
    s = HybridSymbolStream(np.ones(1, bool), np.zeros(1), np.ones((1, 64)), 1024)
    assert serialize(s).nbits - HEADER_BITS == 1025


def test_index_bits():
    assert [index_bits(k) for k in (2, 3, 4, 5, 1024, 1025)] == [1, 2, 2, 3, 10, 11]


def test_first_body_bits_layout():
    s = HybridSymbolStream(np.array([False, True]), np.array([5, 0]), np.array([[0.0], [1.0]]), 8)
    bits = serialize(s).bits()[HEADER_BITS:]
    # INDEX flag, 101, RAW flag, fp16(1.0) = 0x3c00 little-endian -> 00 3c
    expected = [0, 1, 0, 1, 1] + [0] * 8 + [0, 0, 1, 1, 1, 1, 0, 0]
    assert bits.tolist() == expected


def test_roundtrip_1000_random_streams():
    rng = np.random.default_rng(2024)
    for _ in range(1000):
        s = random_stream(rng)
        bs = serialize(s)
        assert bs.nbits == stream_bit_cost(s)
        assert deserialize(bs) == s


@given(st.integers(0, 2 ** 32 - 1), st.floats(0, 1))
@settings(max_examples=100, deadline=None)
def test_roundtrip_property(seed, p_raw):
    s = random_stream(np.random.default_rng(seed), p_raw=p_raw)
    out = deserialize(serialize(s))
    assert out == s
    assert out.raw[s.is_raw].tobytes() == s.raw[s.is_raw].tobytes()


def test_raw_values_half_precision_exact():
    rng = np.random.default_rng(3)
    vals = rng.normal(0, 3, size=(5, 4)).astype(np.float32)
    s = HybridSymbolStream(np.ones(5, bool), np.zeros(5), vals, 16)
    out = deserialize(serialize(s))
    assert np.array_equal(out.raw, vals.astype(np.float16).astype(np.float32))
    np.testing.assert_allclose(out.raw, vals, rtol=2.0 ** -11)


def test_k_too_large():
    s = HybridSymbolStream(np.zeros(1, bool), np.zeros(1), np.zeros((1, 1)), 2 ** 32)
    with pytest.raises(BitstreamError):
        serialize(s)


@pytest.mark.parametrize("name", ["all_index_k1024", "mixed_k5", "all_raw_k2"])
def test_golden_bitstreams(name):
    meta = json.loads((GOLDEN / f"{name}.json").read_text())
    data = (GOLDEN / f"{name}.amvq").read_bytes()
    M = len(meta["is_raw"])
    raw = np.zeros((M, meta["L_dim"]), np.float32)
    for m, vals in meta["raw"].items():
        raw[int(m)] = vals
    s = HybridSymbolStream(meta["is_raw"], meta["indices"], raw, meta["K"])
    bs = serialize(s)
    assert bs.data == data
    assert bs.nbits == meta["nbits"] == stream_bit_cost(s)
    loaded = Bitstream.from_file(GOLDEN / f"{name}.amvq")
    assert loaded.nbits == meta["nbits"]
    out = deserialize(loaded)
    assert out == s
    assert serialize(out).data == data


def test_file_roundtrip(tmp_path):
    s = random_stream(np.random.default_rng(9))
    bs = serialize(s)
    bs.to_file(tmp_path / "s.amvq")
    assert Bitstream.from_file(tmp_path / "s.amvq") == bs


# ---------------------------------------------------------------- rate accounting


def test_bpp_64x64_all_index():
    s = HybridSymbolStream(np.zeros(16, bool), np.arange(16), np.zeros((16, 64)), 1024)
    bs = serialize(s)
    assert bs.nbits - HEADER_BITS == 176
    assert bits_per_pixel(bs, 64, 64) == (HEADER_BITS + 176) / 4096


def test_bpp_all_raw():
    s = HybridSymbolStream(np.ones(16, bool), np.zeros(16), np.ones((16, 64)), 1024)
    bs = serialize(s)
    assert bs.nbits - HEADER_BITS == 16 * 1025
    assert bits_per_pixel(bs, 64, 64) == pytest.approx(4.0 + (HEADER_BITS + 16) / 4096)


@given(st.integers(1, 15))
def test_bpp_ordering(n_raw):
    def bpp(mask):
        s = HybridSymbolStream(mask, np.zeros(16), np.ones((16, 64)), 1024)
        return bits_per_pixel(serialize(s), 64, 64)

    mixed = np.zeros(16, bool)
    mixed[:n_raw] = True
    assert bpp(np.zeros(16, bool)) < bpp(mixed) < bpp(np.ones(16, bool))


def test_bpp_rejects_bad_dims():
    with pytest.raises(ValueError):
        bits_per_pixel(Bitstream(b"", 0), 0, 4)


# ---------------------------------------------------------------- decoding policy


def test_strict_decoding_errors():
    s = random_stream(np.random.default_rng(1), p_raw=0.5)
    bits = serialize(s).bits()
    bad = bits.copy()
    bad[0] ^= 1
    with pytest.raises(BitstreamError, match="magic"):
        deserialize(Bitstream.from_bits(bad))
    with pytest.raises(BitstreamError, match="truncated"):
        deserialize(Bitstream.from_bits(bits[:-3]))
    with pytest.raises(BitstreamError, match="trailing"):
        deserialize(Bitstream.from_bits(np.concatenate([bits, [0, 1]])))
    with pytest.raises(BitstreamError):
        deserialize(Bitstream.from_bits(bits[:40]))


def test_lenient_decoding_repairs_header_and_wraps_indices():
    s = HybridSymbolStream(np.zeros(3, bool), np.array([0, 1, 4]), np.zeros((3, 2)), 5)
    bits = serialize(s).bits()
    bits[0] ^= 1  # damage magic
    body = HEADER_BITS
    bits[body + 1:body + 4] = [1, 1, 1]  # index 7 >= K
    out = deserialize(Bitstream.from_bits(bits), expected=header_of(s), lenient=True)
    assert out.indices.tolist() == [7 % 5, 1, 4]
    with pytest.raises(BitstreamError):
        deserialize(Bitstream.from_bits(bits), expected=header_of(s))


def test_lenient_decoding_zeroes_non_finite_raws():
    s = HybridSymbolStream(np.ones(1, bool), np.zeros(1), np.array([[1.0, 2.0]]), 4)
    bits = serialize(s).bits()
    # exponent bits of the second half float set to all ones -> inf/nan
    second = HEADER_BITS + 1 + 16
    bits[second + 8 + 1:second + 8 + 6] = 1
    out = deserialize(Bitstream.from_bits(bits), expected=StreamHeader(1, 2, 4, 16), lenient=True)
    assert out.raw[0, 0] == 1.0 and out.raw[0, 1] == 0.0
    with pytest.raises(BitstreamError, match="non-finite"):
        deserialize(Bitstream.from_bits(bits))


# ---------------------------------------------------------------- modulation and channel


def test_bpsk_mapping():
    s, pad = modulate(np.array([0, 1, 1]), "bpsk")
    assert s.tolist() == [1, -1, -1] and pad == 0


def test_qpsk_unit_energy_and_gray_map():
    s, pad = modulate(np.array([0, 0, 0, 1, 1, 1, 1, 0, 1]), "qpsk")
    assert pad == 1
    np.testing.assert_allclose(np.abs(s) ** 2, 1.0, atol=1e-12)
    # Gray: neighbours around the circle differ in exactly one bit
    order = {(0, 0): 0, (0, 1): 1, (1, 1): 2, (1, 0): 3}
    for pair, k in order.items():
        sym, _ = modulate(np.array(pair), "qpsk")
        assert np.angle(sym[0]) == pytest.approx(np.angle(np.exp(1j * (np.pi / 4 - k * np.pi / 2))))


@given(st.lists(st.integers(0, 1), min_size=1, max_size=200), st.sampled_from(["bpsk", "qpsk"]))
def test_modulation_roundtrip_and_power(bits, modulation):
    b = np.array(bits, np.uint8)
    s, pad = modulate(b, modulation)
    assert abs(np.mean(np.abs(s) ** 2) - 1) < 1e-6
    out = demodulate(s, modulation)
    assert out.size == b.size + pad
    assert np.array_equal(out[:b.size], b)


def test_noiseless_channel_is_identity():
    s, _ = modulate(np.random.default_rng(0).integers(0, 2, 100), "qpsk")
    r, h = apply_channel(s, ChannelConfig("noiseless"))
    assert np.array_equal(r, s) and np.all(h == 1)


def test_awgn_noise_variance():
    s = np.ones(100_000, complex)
    r, h = apply_channel(s, ChannelConfig("awgn", snr_db=10.0, seed=1))
    assert np.all(h == 1)
    assert np.var(r - s) == pytest.approx(0.1, rel=0.03)


def test_rayleigh_gain_power():
    _, h = apply_channel(np.ones(100_000, complex), ChannelConfig("rayleigh", snr_db=10.0, seed=2))
    assert np.mean(np.abs(h) ** 2) == pytest.approx(1.0, rel=0.03)


def test_seeded_reproducibility():
    s = np.ones(1000, complex)
    cfg = ChannelConfig("rayleigh", snr_db=5.0, seed=11)
    a, _ = apply_channel(s, cfg)
    b, _ = apply_channel(s, cfg)
    assert np.array_equal(a, b)


def _ber(cfg, n, seed):
    bits = np.random.default_rng(seed).integers(0, 2, n).astype(np.uint8)
    out = transmit_bits(bits, cfg, np.random.default_rng(seed + 1))
    return float(np.mean(out != bits))


def test_rayleigh_ber_matches_theory():
    emp = _ber(ChannelConfig("rayleigh", snr_db=10.0), 1_000_000, 5)
    assert emp == pytest.approx(rayleigh_bpsk_ber(10.0), rel=0.10)


def test_awgn_ber_matches_theory():
    g = 10 ** 0.8
    assert awgn_bpsk_ber(8.0) == pytest.approx(q_func(math.sqrt(2 * g)), rel=1e-12)
    emp = _ber(ChannelConfig("awgn", snr_db=8.0), 2_000_000, 6)
    assert emp == pytest.approx(awgn_bpsk_ber(8.0), rel=0.10)


def test_qpsk_per_bit_ber_matches_bpsk_at_same_symbol_snr_minus_3db():
    # Gray QPSK at Es/N0 = snr has the BPSK bit error rate of Eb/N0 = snr - 3.01 dB
    emp = _ber(ChannelConfig("awgn", snr_db=8.0 + 10 * math.log10(2), modulation="qpsk"), 2_000_000, 7)
    assert emp == pytest.approx(awgn_bpsk_ber(8.0), rel=0.10)


def test_repetition_at_high_snr_is_transparent():
    s = random_stream(np.random.default_rng(4), M=32, L=8, K=1024, p_raw=0.5)
    cfg = ChannelConfig("awgn", snr_db=30.0, coder="repetition-3", seed=3)
    rx = transmit(serialize(s), cfg, np.random.default_rng(3))
    assert deserialize(rx) == s


def test_noiseless_transmission_transparent():
    s = random_stream(np.random.default_rng(5), p_raw=0.5)
    bs = serialize(s)
    for modulation in ("bpsk", "qpsk"):
        rx = transmit(bs, ChannelConfig(modulation=modulation))
        assert rx == bs
        assert deserialize(rx) == s


def test_equalizer_guards_dead_coefficients():
    cfg = ChannelConfig("rayleigh")
    r = np.array([0.3 + 0j, -0.2 + 0j])
    h = np.array([0j, 1e-13 + 0j])
    assert equalize_demodulate(r, h, cfg, 2).tolist() == [0, 1]
    with pytest.raises(ValueError, match="length"):
        equalize_demodulate(r, h[:1], cfg, 2)


def test_channel_config_validation():
    for kw in ({"kind": "fiber"}, {"modulation": "16qam"}, {"coder": "ldpc"}, {"snr_db": float("nan")}):
        with pytest.raises(ValueError):
            ChannelConfig(**kw)
    assert ChannelConfig(snr_db=10.0).noise_variance == pytest.approx(0.1)
