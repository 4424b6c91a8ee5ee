"""Command-line entry point.

Exit status is 0 on success, 2 for a configuration or usage error and 3 for
a failure while running.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .channel import Bitstream, StreamHeader, bits_per_pixel, deserialize, serialize, transmit
from .codec import ConfigError
from .data import load_image, save_image, synth_panorama
from .harness import ExperimentConfig, load_images, rd_sweep, threshold_sweep, train_model
from .metrics import perceptual_loss, to_8bit_scale, vpsnr, vssim
from .pipeline import AMVQModel, analyse, reconstruct

log = logging.getLogger("amvq")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3


class UsageError(ConfigError):
    """Flags that cannot work together."""


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="experiment config (JSON)")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--out", help="output file or directory")
    p.add_argument("--checkpoint", help="model checkpoint path")
    p.add_argument("--invert-threshold", action="store_true", help="send RAW where the map is at or below T")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="amvq", description="AM-VQ semantic communication simulator")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write procedural panoramas as PNG")
    _common(p)
    p.add_argument("--count", type=int, default=1)
    p.add_argument("--height", type=int, default=64)

    p = sub.add_parser("train", help="train a model and write a checkpoint")
    _common(p)

    p = sub.add_parser("encode", help="image -> AM-VQ bitstream")
    _common(p)
    p.add_argument("image")
    p.add_argument("--threshold", type=float, default=None)

    p = sub.add_parser("decode", help="bitstream -> PNG")
    _common(p)
    p.add_argument("bitstream")

    p = sub.add_parser("transmit", help="pass a bitstream through the simulated channel")
    _common(p)
    p.add_argument("bitstream")
    p.add_argument("--channel", choices=("noiseless", "awgn", "rayleigh"), default=None)
    p.add_argument("--snr", type=float, default=None)
    p.add_argument("--modulation", choices=("bpsk", "qpsk"), default=None)
    p.add_argument("--coder", choices=("passthrough", "repetition-3"), default=None)

    for name in ("rd-sweep", "threshold-sweep"):
        p = sub.add_parser(name, help=f"run the {name.replace('-', ' ')}")
        _common(p)
        p.add_argument("--train", action="store_true", help="train a model first when no checkpoint is given")

    p = sub.add_parser("metrics", help="VPSNR, VSSIM and perceptual loss of two images")
    _common(p)
    p.add_argument("reference")
    p.add_argument("distorted")
    return parser


def _config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.from_json(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    if args.invert_threshold:
        cfg = dataclasses.replace(cfg, train=dataclasses.replace(cfg.train, invert_threshold=True))
    if getattr(args, "channel", None) or getattr(args, "snr", None) is not None \
            or getattr(args, "modulation", None) or getattr(args, "coder", None):
        overrides = {k: v for k, v in (("kind", args.channel), ("snr_db", args.snr),
                                       ("modulation", args.modulation), ("coder", args.coder)) if v is not None}
        try:
            cfg = dataclasses.replace(cfg, channel=dataclasses.replace(cfg.channel, **overrides))
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
    return cfg


def _out(args, default: str) -> Path:
    return Path(args.out if args.out else default)


def _model(args, cfg: ExperimentConfig, out: Path, allow_train: bool = False) -> AMVQModel:
    if args.checkpoint:
        return AMVQModel.load(args.checkpoint)
    if allow_train and getattr(args, "train", False):
        out.mkdir(parents=True, exist_ok=True)
        model = train_model(cfg, load_images(cfg).images, log_path=out / "train_log.ndjson")
        model.save(out / "checkpoint.bin", extra={"experiment": cfg.to_dict()})
        return model
    raise UsageError("--checkpoint is required" + (" (or pass --train)" if allow_train else ""))


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def cmd_synth(args, cfg):
    out = _out(args, "synth")
    out.mkdir(parents=True, exist_ok=True)
    for i in range(args.count):
        save_image(out / f"synth{cfg.seed + i:04d}.png", synth_panorama(cfg.seed + i, args.height))


def cmd_train(args, cfg):
    out = _out(args, cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "config.json", cfg.to_dict())
    model = train_model(cfg, load_images(cfg).images, log_path=out / "train_log.ndjson")
    model.save(out / "checkpoint.bin", extra={"experiment": cfg.to_dict()})


def cmd_encode(args, cfg):
    model = _model(args, cfg, Path("."))
    mc = model.config
    x = load_image(args.image, mc.image_height)
    T = cfg.train.threshold if args.threshold is None else args.threshold
    ana = analyse(model, x, T, cfg.train.invert_threshold, cfg.train.beta)
    bits = serialize(ana.stream, cfg.raw_precision)
    out = _out(args, Path(args.image).with_suffix(".amvq").name)
    bits.to_file(out)
    summary = {"nbits": bits.nbits, "bpp": bits_per_pixel(bits, mc.image_height, mc.image_width),
               "raw_fraction": ana.stream.raw_fraction, "T": T}
    _write_json(out.with_name(out.name + ".json"), summary)


def cmd_decode(args, cfg):
    model = _model(args, cfg, Path("."))
    # the model fixes every header field, so a header damaged in transit can be repaired
    expected = StreamHeader(model.config.num_positions, model.config.feature_channels, model.codebook.K,
                            cfg.raw_precision)
    stream = deserialize(Bitstream.from_file(args.bitstream), expected=expected, lenient=True)
    _, x_hat = reconstruct(model, stream)
    save_image(_out(args, Path(args.bitstream).with_suffix(".png").name), x_hat)


def cmd_transmit(args, cfg):
    bits = Bitstream.from_file(args.bitstream)
    rx = transmit(bits, cfg.channel, np.random.default_rng(cfg.seed))
    rx.to_file(_out(args, Path(args.bitstream).with_suffix(".rx.amvq").name))


def _sweep(args, cfg, fn, default_name):
    out = _out(args, cfg.out_dir)
    model = _model(args, cfg, out, allow_train=True)
    fn(cfg, model, load_images(cfg), out)
    _write_json(out / f"{default_name}_config.json", cfg.to_dict())


def cmd_rd_sweep(args, cfg):
    _sweep(args, cfg, rd_sweep, "rd")


def cmd_threshold_sweep(args, cfg):
    _sweep(args, cfg, threshold_sweep, "threshold")


def cmd_metrics(args, cfg):
    x = load_image(args.reference)
    y = load_image(args.distorted)
    a, b = to_8bit_scale(x), to_8bit_scale(y)
    result = {"vpsnr_db": vpsnr(a, b), "vssim": vssim(a, b), "perceptual": perceptual_loss(x, y)}
    if args.out:
        _write_json(Path(args.out), result)
    else:
        print(json.dumps(result, sort_keys=True))


COMMANDS = {
    "synth": cmd_synth, "train": cmd_train, "encode": cmd_encode, "decode": cmd_decode,
    "transmit": cmd_transmit, "rd-sweep": cmd_rd_sweep, "threshold-sweep": cmd_threshold_sweep,
    "metrics": cmd_metrics,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = _config(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        COMMANDS[args.command](args, cfg)
    except UsageError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - every failure maps to one exit status
        log.debug("failure", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
