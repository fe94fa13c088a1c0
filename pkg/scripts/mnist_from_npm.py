"""Convert the digits bundled in the ``mnist`` npm package into IDX files.

The package (``npm pack mnist``, version 1.1.0) ships 10,000 MNIST digits as
JSON arrays of pixel/255 rounded to three decimals. Rounding ``v * 255``
recovers the original bytes. The digits are split 80/20 per class with a
seeded shuffle and written as gzip-compressed IDX files that
``hwgq.data.load_mnist`` reads directly.

    python scripts/mnist_from_npm.py path/to/package/src/digits tests/data/mnist10k
"""

from __future__ import annotations

import argparse
import gzip
import json
import struct
from pathlib import Path

import numpy as np

from hwgq.data import IDX_IMAGES, IDX_LABELS
from hwgq.tensor import Rng


def load_digits(src: Path) -> tuple[np.ndarray, np.ndarray]:
    images, labels = [], []
    for d in range(10):
        values = np.asarray(json.loads((src / f"{d}.json").read_text())["data"], dtype=np.float64)
        raw = np.rint(values * 255.0)
        if np.abs(raw - values * 255.0).max() > 0.5 or raw.min() < 0 or raw.max() > 255:
            raise ValueError(f"{d}.json: values are not byte/255")
        img = raw.astype(np.uint8).reshape(-1, 28, 28)
        images.append(img)
        labels.append(np.full(len(img), d, np.uint8))
    return images, labels


def split(images, labels, test_fraction: float, seed: int):
    rng = Rng(seed)
    tr_x, tr_y, te_x, te_y = [], [], [], []
    for d, (x, y) in enumerate(zip(images, labels)):
        perm = rng.spawn(d).permutation(len(x))
        n_test = int(round(len(x) * test_fraction))
        te_x.append(x[perm[:n_test]])
        te_y.append(y[perm[:n_test]])
        tr_x.append(x[perm[n_test:]])
        tr_y.append(y[perm[n_test:]])
    out = []
    for key, xs, ys in ((10, tr_x, tr_y), (11, te_x, te_y)):
        x, y = np.concatenate(xs), np.concatenate(ys)
        order = rng.spawn(key).permutation(len(x))
        out.append((x[order], y[order]))
    return out


def write_idx(path: Path, magic: int, arr: np.ndarray) -> None:
    header = struct.pack(">I", magic) + struct.pack(f">{arr.ndim}I", *arr.shape)
    # fixed mtime keeps the compressed bytes reproducible
    path.write_bytes(gzip.compress(header + arr.tobytes(), mtime=0))


def main(argv=None) -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("digits", type=Path, help="the package's src/digits directory")
    ap.add_argument("out", type=Path)
    ap.add_argument("--test-fraction", type=float, default=0.2)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)
    images, labels = load_digits(args.digits)
    (trx, try_), (tex, tey) = split(images, labels, args.test_fraction, args.seed)
    args.out.mkdir(parents=True, exist_ok=True)
    write_idx(args.out / "train-images-idx3-ubyte.gz", IDX_IMAGES, trx)
    write_idx(args.out / "train-labels-idx1-ubyte.gz", IDX_LABELS, try_)
    write_idx(args.out / "t10k-images-idx3-ubyte.gz", IDX_IMAGES, tex)
    write_idx(args.out / "t10k-labels-idx1-ubyte.gz", IDX_LABELS, tey)
    print(f"train {len(trx)}  test {len(tex)}  -> {args.out}")


if __name__ == "__main__":
    main()
