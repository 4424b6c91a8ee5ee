"""Experiment configuration, training driver and rate-distortion / threshold sweeps."""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .channel import ChannelConfig
from .codec import CodecConfig, ConfigError
from .data import Dataset, ingest_dataset, save_image, synthetic_dataset
from .metrics import perceptual_loss, to_8bit_scale, vpsnr, vssim
from .pipeline import AMVQModel, run_pipeline
from .train import TrainConfig, Trainer

log = logging.getLogger(__name__)

DEFAULT_T_GRID = tuple(round(0.1 * i, 1) for i in range(11))
RD_COLUMNS = ("image_id", "bpp", "vpsnr_db", "vssim", "perceptual", "raw_fraction", "T", "snr_db")
VPSNR_TOLERANCE_DB = 0.2


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything needed to regenerate a run from scratch.

    ``seed`` drives model initialisation, training order, synthetic data and
    the per-cell channel seeds. ``snr_grid`` is ignored for a noiseless
    channel, which contributes a single cell with ``snr_db = inf``.
    """

    codec: CodecConfig = field(default_factory=CodecConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    channel: ChannelConfig = field(default_factory=ChannelConfig)
    K: int = 1024
    t_grid: tuple[float, ...] = DEFAULT_T_GRID
    rd_t_grid: tuple[float, ...] = (0.0, 0.3, 1.0)
    snr_grid: tuple[float, ...] = (0.0, 5.0, 10.0, 20.0)
    dataset: str | None = None
    synthetic_count: int = 16
    raw_precision: int = 16
    out_dir: str = "runs/default"
    seed: int = 0

    def __post_init__(self):
        if self.K < 2:
            raise ConfigError(f"codebook size K must be >= 2, got {self.K}")
        for name in ("t_grid", "rd_t_grid", "snr_grid"):
            grid = getattr(self, name)
            if not grid:
                raise ConfigError(f"{name} must be non-empty")
            if not all(math.isfinite(v) for v in grid):
                raise ConfigError(f"{name} must hold finite values")
        if any(t < 0 for t in self.t_grid + self.rd_t_grid):
            raise ConfigError("thresholds must be non-negative")
        if self.dataset is None and self.synthetic_count < 1:
            raise ConfigError("synthetic_count must be >= 1 when no dataset is given")
        if self.raw_precision != 16:
            raise ConfigError("only 16-bit raw precision is supported")

    @classmethod
    def from_dict(cls, raw: dict) -> ExperimentConfig:
        """Build from a nested mapping; unknown keys are rejected."""
        raw = dict(raw)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            for key, sub in (("codec", CodecConfig), ("train", TrainConfig), ("channel", ChannelConfig)):
                if key in raw:
                    raw[key] = _sub_config(sub, raw[key], key)
            for key in ("t_grid", "rd_t_grid", "snr_grid"):
                if key in raw:
                    raw[key] = tuple(float(v) for v in raw[key])
            return cls(**raw)
        except ConfigError:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def from_json(cls, path) -> ExperimentConfig:
        try:
            raw = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError("config root must be a JSON object")
        return cls.from_dict(raw)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def with_seed(self, seed: int) -> ExperimentConfig:
        return dataclasses.replace(self, seed=seed)

    def resolved_train(self) -> TrainConfig:
        return dataclasses.replace(self.train, seed=self.seed)


def _sub_config(cls, value, name):
    if isinstance(value, cls):
        return value
    if not isinstance(value, dict):
        raise ConfigError(f"{name} must be an object")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(value) - names
    if unknown:
        raise ConfigError(f"unknown {name} keys: {sorted(unknown)}")
    return cls(**value)


@dataclass(frozen=True)
class RDPoint:
    image_id: str
    bpp: float
    vpsnr_db: float
    vssim: float
    perceptual: float
    raw_fraction: float
    T: float
    snr_db: float

    def __post_init__(self):
        if not self.bpp > 0:
            raise ValueError(f"bpp must be positive, got {self.bpp}")


def load_images(cfg: ExperimentConfig) -> Dataset:
    if cfg.dataset is not None:
        return ingest_dataset(cfg.dataset, cfg.codec.image_height)
    return synthetic_dataset(cfg.synthetic_count, cfg.codec.image_height, seed=cfg.seed)


def train_model(cfg: ExperimentConfig, images, log_path=None) -> AMVQModel:
    model = AMVQModel.create(cfg.codec, K=cfg.K, seed=cfg.seed)
    Trainer(model, cfg.resolved_train()).fit(list(images), log_path=log_path)
    return model.eval()


def cell_seed(seed: int, *coords: int) -> int:
    """Independent 63-bit seed for one sweep cell."""
    return int(np.random.SeedSequence([seed, *coords]).generate_state(2, np.uint32).view(np.uint64)[0] >> 1)


def _snr_cells(cfg: ExperimentConfig) -> list[tuple[float, ChannelConfig]]:
    if cfg.channel.kind == "noiseless":
        return [(math.inf, cfg.channel)]
    return [(s, dataclasses.replace(cfg.channel, snr_db=s)) for s in cfg.snr_grid]


def _fmt(v) -> str:
    if isinstance(v, str):
        return v
    return repr(float(v))


def write_csv(path, columns, rows) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([_fmt(row[c]) for c in columns])


def evaluate_cell(model: AMVQModel, x: np.ndarray, T: float, channel: ChannelConfig, seed: int,
                  invert: bool = False, beta: float = 0.25, raw_precision: int = 16):
    """One pipeline pass plus the three quality scores."""
    res = run_pipeline(model, x, T, channel, invert=invert, raw_precision=raw_precision, beta=beta,
                       rng=np.random.default_rng(seed))
    a, b = to_8bit_scale(x), to_8bit_scale(res.x_hat)
    scores = {"vpsnr_db": vpsnr(a, b), "vssim": vssim(a, b), "perceptual": perceptual_loss(x, res.x_hat)}
    return res, scores


def rd_sweep(cfg: ExperimentConfig, model: AMVQModel, dataset: Dataset, out_dir=None) -> list[RDPoint]:
    """Rate-distortion table over (image, T, SNR); writes ``rd.csv`` and PNG reconstructions."""
    out = Path(out_dir if out_dir is not None else cfg.out_dir)
    (out / "recon").mkdir(parents=True, exist_ok=True)
    invert = cfg.train.invert_threshold
    points = []
    for i, (name, x) in enumerate(zip(dataset.names, dataset.images)):
        for j, (snr, channel) in enumerate(_snr_cells(cfg)):
            raw_counts = []
            for k, T in enumerate(sorted(cfg.rd_t_grid)):
                res, sc = evaluate_cell(model, x, T, channel, cell_seed(cfg.seed, i, j, k), invert,
                                        cfg.train.beta, cfg.raw_precision)
                raw_counts.append(int(res.sent.is_raw.sum()))
                save_image(out / "recon" / f"{name}_T{T:.2f}_snr{snr:g}.png", res.x_hat)
                points.append(RDPoint(name, res.bpp, sc["vpsnr_db"], sc["vssim"], sc["perceptual"],
                                      res.raw_fraction, T, snr))
            _assert_coverage(raw_counts, invert, name)
    write_csv(out / "rd.csv", RD_COLUMNS, [dataclasses.asdict(p) for p in points])
    return points


def _assert_coverage(raw_counts: list[int], invert: bool, name: str) -> None:
    steps = np.diff(raw_counts)
    ok = np.all(steps >= 0) if invert else np.all(steps <= 0)
    if not ok:
        raise RuntimeError(f"RAW coverage not monotone in T for {name}: {raw_counts}")


THRESHOLD_COLUMNS = ("T", "vpsnr_eq7", "bpp_eq7", "raw_fraction_eq7", "vpsnr_inv", "bpp_inv", "raw_fraction_inv")


def threshold_sweep(cfg: ExperimentConfig, model: AMVQModel, dataset: Dataset, out_dir=None) -> list[dict]:
    """Dataset-mean VPSNR, bpp and RAW fraction per T, literal and inverted rule side by side.

    Writes ``threshold.csv``. Under the literal rule a VPSNR rise of more than
    0.2 dB with growing T is logged as a warning rather than raised.
    """
    out = Path(out_dir if out_dir is not None else cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _, channel = _snr_cells(cfg)[0]
    rows = []
    for k, T in enumerate(sorted(cfg.t_grid)):
        row = {"T": T}
        for suffix, invert in (("eq7", False), ("inv", True)):
            v, b, r = [], [], []
            for i, x in enumerate(dataset.images):
                res = run_pipeline(model, x, T, channel, invert=invert, raw_precision=cfg.raw_precision,
                                   beta=cfg.train.beta, rng=np.random.default_rng(cell_seed(cfg.seed, i, int(invert), k)))
                v.append(vpsnr(to_8bit_scale(x), to_8bit_scale(res.x_hat)))
                b.append(res.bpp)
                r.append(res.raw_fraction)
            row.update({f"vpsnr_{suffix}": float(np.mean(v)), f"bpp_{suffix}": float(np.mean(b)),
                        f"raw_fraction_{suffix}": float(np.mean(r))})
        rows.append(row)
    raw = [r["raw_fraction_eq7"] for r in rows]
    if np.any(np.diff(raw) > 0):
        raise RuntimeError(f"raw_fraction_eq7 increases with T: {raw}")
    for prev, cur in zip(rows, rows[1:]):
        if cur["vpsnr_eq7"] > prev["vpsnr_eq7"] + VPSNR_TOLERANCE_DB:
            log.warning("vpsnr_eq7 rises from %.3f dB at T=%g to %.3f dB at T=%g",
                        prev["vpsnr_eq7"], prev["T"], cur["vpsnr_eq7"], cur["T"])
    write_csv(out / "threshold.csv", THRESHOLD_COLUMNS, rows)
    return rows
