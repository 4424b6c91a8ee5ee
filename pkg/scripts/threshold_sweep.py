"""Threshold sweep over T for a checkpoint, literal and inverted RAW rule side by side.

    python scripts/threshold_sweep.py --checkpoint runs/default/checkpoint.bin --out runs/threshold
"""

import argparse
import logging
from pathlib import Path

from amvq.harness import ExperimentConfig, load_images, threshold_sweep
from amvq.pipeline import AMVQModel


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--checkpoint", required=True)
    parser.add_argument("--config", help="experiment config JSON (dataset, grid, seed)")
    parser.add_argument("--out", default="runs/threshold")
    args = parser.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(name)s: %(message)s")

    cfg = ExperimentConfig.from_json(args.config) if args.config else ExperimentConfig()
    model = AMVQModel.load(args.checkpoint)
    rows = threshold_sweep(cfg, model, load_images(cfg), Path(args.out))
    print(f"{'T':>4} | {'VPSNR':>7} {'bpp':>7} {'RAW':>5} | {'VPSNR':>7} {'bpp':>7} {'RAW':>5}")
    print(f"{'':>4} | {'literal rule':^21} | {'inverted rule':^21}")
    for r in rows:
        print(f"{r['T']:4.1f} | {r['vpsnr_eq7']:7.2f} {r['bpp_eq7']:7.4f} {r['raw_fraction_eq7']:5.2f} | "
              f"{r['vpsnr_inv']:7.2f} {r['bpp_inv']:7.4f} {r['raw_fraction_inv']:5.2f}")


if __name__ == "__main__":
    main()
