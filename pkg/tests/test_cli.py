import json

import numpy as np
import pytest

from amvq.channel import Bitstream
from amvq.cli import EXIT_CONFIG, EXIT_OK, EXIT_RUNTIME, main
from amvq.data import save_image, synth_panorama


def run(*argv) -> int:
    return main([str(a) for a in argv])


def files(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture
def image(tmp_path):
    path = tmp_path / "pano.png"
    save_image(path, synth_panorama(9, 32))
    return path


def test_bad_config_exits_2(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"train": {"lam": -1}}))
    assert run("train", "--config", cfg, "--out", tmp_path / "o") == EXIT_CONFIG
    cfg.write_text("[1, 2]")
    assert run("train", "--config", cfg) == EXIT_CONFIG
    assert run("train", "--config", tmp_path / "missing.json") == EXIT_CONFIG


def test_usage_errors_exit_2(tmp_path, tiny_config_file):
    assert run("rd-sweep", "--config", tiny_config_file, "--out", tmp_path) == EXIT_CONFIG
    assert run("encode", tmp_path / "x.png") == EXIT_CONFIG
    assert run("no-such-command") == EXIT_CONFIG
    assert run("transmit", "x.amvq", "--modulation", "psk8") == EXIT_CONFIG


def test_runtime_failure_exits_3(tmp_path, tiny_checkpoint):
    assert run("encode", tmp_path / "missing.png", "--checkpoint", tiny_checkpoint) == EXIT_RUNTIME
    assert run("metrics", tmp_path / "a.png", tmp_path / "b.png") == EXIT_RUNTIME


def test_encode_decode_noiseless(tmp_path, image, tiny_checkpoint):
    out = tmp_path / "pano.amvq"
    assert run("encode", image, "--checkpoint", tiny_checkpoint, "--out", out, "--threshold", 0.3) == EXIT_OK
    summary = json.loads((tmp_path / "pano.amvq.json").read_text())
    assert summary["nbits"] == Bitstream.from_file(out).nbits and summary["T"] == 0.3
    assert run("transmit", out, "--out", tmp_path / "rx.amvq") == EXIT_OK
    assert (tmp_path / "rx.amvq").read_bytes() == out.read_bytes()
    assert run("decode", tmp_path / "rx.amvq", "--checkpoint", tiny_checkpoint, "--out", tmp_path / "d.png") == EXIT_OK
    assert (tmp_path / "d.png").exists()


def test_decode_repairs_damaged_header(tmp_path, image, tiny_checkpoint):
    out = tmp_path / "pano.amvq"
    run("encode", image, "--checkpoint", tiny_checkpoint, "--out", out)
    bits = Bitstream.from_file(out).bits().copy()
    bits[3] ^= 1  # inside the magic
    Bitstream.from_bits(bits).to_file(tmp_path / "bad.amvq")
    assert run("decode", tmp_path / "bad.amvq", "--checkpoint", tiny_checkpoint, "--out", tmp_path / "a.png") == EXIT_OK
    run("decode", out, "--checkpoint", tiny_checkpoint, "--out", tmp_path / "b.png")
    assert (tmp_path / "a.png").read_bytes() == (tmp_path / "b.png").read_bytes()


def test_metrics_command(tmp_path, image, capsys):
    assert run("metrics", image, image) == EXIT_OK
    result = json.loads(capsys.readouterr().out)
    assert result == {"perceptual": 0.0, "vpsnr_db": 100.0, "vssim": pytest.approx(1.0)}


def test_invert_flag_reaches_encoder(tmp_path, image, tiny_checkpoint):
    run("encode", image, "--checkpoint", tiny_checkpoint, "--out", tmp_path / "a.amvq", "--threshold", 1.0)
    run("encode", image, "--checkpoint", tiny_checkpoint, "--out", tmp_path / "b.amvq", "--threshold", 1.0,
        "--invert-threshold")
    a = json.loads((tmp_path / "a.amvq.json").read_text())
    b = json.loads((tmp_path / "b.amvq.json").read_text())
    assert a["raw_fraction"] == 0.0 and b["raw_fraction"] == 1.0


def _twice(tmp_path, make_argv):
    outs = []
    for tag in ("first", "second"):
        out = tmp_path / tag
        out.mkdir()
        assert run(*make_argv(out)) == EXIT_OK
        outs.append(files(out))
    return outs


@pytest.mark.parametrize("command", ["synth", "train", "encode", "decode", "transmit", "rd-sweep",
                                     "threshold-sweep", "metrics"])
def test_deterministic_outputs(tmp_path, command, image, tiny_checkpoint, tiny_config_file):
    common = ["--config", tiny_config_file, "--seed", 3]
    bits = tmp_path / "in.amvq"
    run("encode", image, "--checkpoint", tiny_checkpoint, "--out", bits)
    argv = {
        "synth": lambda o: ["synth", *common, "--count", 2, "--height", 32, "--out", o],
        "train": lambda o: ["train", *common, "--out", o],
        "encode": lambda o: ["encode", image, *common, "--checkpoint", tiny_checkpoint, "--out", o / "x.amvq"],
        "decode": lambda o: ["decode", bits, *common, "--checkpoint", tiny_checkpoint, "--out", o / "x.png"],
        "transmit": lambda o: ["transmit", bits, *common, "--channel", "awgn", "--snr", 3, "--out", o / "rx.amvq"],
        "rd-sweep": lambda o: ["rd-sweep", *common, "--train", "--out", o],
        "threshold-sweep": lambda o: ["threshold-sweep", *common, "--checkpoint", tiny_checkpoint, "--out", o],
        "metrics": lambda o: ["metrics", image, bits.with_suffix(".png"), *common, "--out", o / "m.json"],
    }[command]
    if command == "metrics":
        save_image(bits.with_suffix(".png"), np.clip(synth_panorama(9, 32) + 0.05, -1, 1))
    first, second = _twice(tmp_path, argv)
    assert first and first == second
    if command == "train":
        assert {"config.json", "train_log.ndjson", "checkpoint.bin"} <= set(first)
        assert first["train_log.ndjson"].count(b"\n") == 12
    if command == "transmit":
        assert first["rx.amvq"] != bits.read_bytes()
