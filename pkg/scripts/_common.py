"""Shared setup for the experiment scripts: dataset on disk, logging, arguments."""

import argparse
import logging
from pathlib import Path

from pagkd.synthdata import ImageStore, SynthConfig, generate


def parser(description: str) -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(description=description)
    p.add_argument("--data", type=Path, default=Path("runs/data"), help="dataset dir, generated if missing")
    p.add_argument("--gap", type=float, default=SynthConfig.gap)
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    p.add_argument("--folds", type=int, nargs="+")
    p.add_argument("--out", type=Path, default=Path("runs"))
    return p


def open_store(args) -> ImageStore:
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s: %(message)s")
    if not (args.data / "manifest.csv").exists():
        generate(args.data, SynthConfig(gap=args.gap))
    return ImageStore(args.data)
