#!/usr/bin/env python3
"""Materialize the bundled scikit-learn handwritten digits as IDX files.

The 8x8 grayscale digits (1797 samples, UCI optical recognition corpus that
ships inside scikit-learn, so no download is needed) are upsampled 2x
nearest-neighbor to a 16x16 grid and written in the classic big-endian IDX
layout consumed by the idx-bits data loader.
"""

import argparse
from pathlib import Path

import numpy as np
from sklearn.datasets import load_digits

from bitlatent.data import write_idx


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", default="data", help="output directory")
    args = parser.parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    digits = load_digits()
    imgs = digits.images.astype(np.float32) / 16.0  # native range 0..16
    imgs = np.repeat(np.repeat(imgs, 2, axis=1), 2, axis=2)  # 8x8 -> 16x16
    imgs_u8 = np.clip(imgs * 255.0, 0, 255).round().astype(np.uint8)
    labels = digits.target.astype(np.uint8)
    write_idx(out / "digits-images.idx3", imgs_u8)
    write_idx(out / "digits-labels.idx1", labels)
    print(f"{imgs_u8.shape[0]} digits -> {out}/digits-images.idx3, "
          f"{out}/digits-labels.idx1")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
