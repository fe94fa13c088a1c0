"""Dataset loading (MNIST IDX, CIFAR-10 binary, synthetic) and augmentation.

Directory layouts::

    mnist/   train-images-idx3-ubyte  train-labels-idx1-ubyte
             t10k-images-idx3-ubyte   t10k-labels-idx1-ubyte
             (each may also be gzip-compressed with a ``.gz`` suffix)
    cifar10/ data_batch_1.bin ... data_batch_5.bin  test_batch.bin
             (optionally inside a ``cifar-10-batches-bin/`` subdirectory)

Images are scaled to [0, 1] and then normalized per channel with the mean
and standard deviation of the training split.
"""

from __future__ import annotations

import gzip
import hashlib
import json
import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .tensor import DTYPE, Rng, Tensor


class DataError(ValueError):
    """Malformed dataset file."""


@dataclass
class Dataset:
    images: Tensor  # N x C x H x W, normalized
    labels: np.ndarray  # N int64
    split: str
    class_count: int
    mean: np.ndarray  # per-channel normalization, from the train split
    std: np.ndarray
    name: str = "dataset"

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise DataError(f"{len(self.images)} images but {len(self.labels)} labels")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise DataError(f"labels must lie in [0, {self.class_count})")

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, n: int) -> "Dataset":
        return replace(self, images=self.images[:n], labels=self.labels[:n])

    def zero_level(self) -> np.ndarray:
        """Normalized value of a raw 0 pixel, per channel."""
        return (-self.mean / self.std).astype(DTYPE)

    def denormalize(self) -> np.ndarray:
        return self.images * self.std.reshape(1, -1, 1, 1) + self.mean.reshape(1, -1, 1, 1)


def channel_stats(raw: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mean = raw.mean(axis=(0, 2, 3), dtype=np.float64)
    std = raw.std(axis=(0, 2, 3), dtype=np.float64)
    return mean.astype(DTYPE), np.maximum(std, 1e-8).astype(DTYPE)


def normalize(raw: np.ndarray, mean, std) -> Tensor:
    return ((raw - mean.reshape(1, -1, 1, 1)) / std.reshape(1, -1, 1, 1)).astype(DTYPE)


def _make_pair(name, train_raw, train_y, test_raw, test_y, classes, stats=None):
    mean, std = stats if stats is not None else channel_stats(train_raw)
    train = Dataset(normalize(train_raw, mean, std), train_y, "train", classes, mean, std, name)
    test = Dataset(normalize(test_raw, mean, std), test_y, "test", classes, mean, std, name)
    return train, test


# --------------------------------------------------------------------------
# MNIST
# --------------------------------------------------------------------------

IDX_IMAGES = 0x00000803
IDX_LABELS = 0x00000801


def _read_maybe_gz(path: Path) -> bytes:
    if path.exists():
        return path.read_bytes()
    gz = path.with_name(path.name + ".gz")
    if gz.exists():
        return gzip.decompress(gz.read_bytes())
    raise FileNotFoundError(f"{path} (or {gz.name}) not found")


def read_idx(data: bytes, expected_magic: int, source: str = "<idx>") -> np.ndarray:
    if len(data) < 8:
        raise DataError(f"{source}: truncated header at byte offset {len(data)}")
    magic, count = struct.unpack(">II", data[:8])
    if magic != expected_magic:
        raise DataError(f"{source}: bad magic 0x{magic:08x} at byte offset 0, expected 0x{expected_magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(data) < header:
        raise DataError(f"{source}: truncated header, expected {header} bytes, got {len(data)}")
    dims = struct.unpack(f">{ndim}I", data[4:header])
    expected = header + int(np.prod(dims))
    if len(data) != expected:
        raise DataError(
            f"{source}: expected {expected} bytes for dims {dims}, got {len(data)} "
            f"(mismatch at byte offset {min(len(data), expected)})"
        )
    return np.frombuffer(data, dtype=np.uint8, offset=header).reshape(dims)


def load_mnist(directory, stats=None) -> tuple[Dataset, Dataset]:
    d = Path(directory)
    out = {}
    for split, prefix in (("train", "train"), ("test", "t10k")):
        img_path = d / f"{prefix}-images-idx3-ubyte"
        lbl_path = d / f"{prefix}-labels-idx1-ubyte"
        images = read_idx(_read_maybe_gz(img_path), IDX_IMAGES, img_path.name)
        labels = read_idx(_read_maybe_gz(lbl_path), IDX_LABELS, lbl_path.name)
        if images.shape[0] != labels.shape[0]:
            raise DataError(f"{split}: {images.shape[0]} images but {labels.shape[0]} labels")
        raw = (images.astype(DTYPE) / 255.0)[:, None, :, :]
        out[split] = (raw, labels.astype(np.int64))
    return _make_pair("mnist", *out["train"], *out["test"], 10, stats)


# --------------------------------------------------------------------------
# CIFAR-10
# --------------------------------------------------------------------------

CIFAR_RECORD = 1 + 3 * 32 * 32


def read_cifar_batch(data: bytes, source: str = "<batch>") -> tuple[np.ndarray, np.ndarray]:
    if len(data) % CIFAR_RECORD:
        raise DataError(
            f"{source}: size {len(data)} is not a multiple of the {CIFAR_RECORD}-byte record "
            f"(trailing partial record at byte offset {len(data) - len(data) % CIFAR_RECORD})"
        )
    rec = np.frombuffer(data, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = rec[:, 0].astype(np.int64)
    if labels.size and labels.max() > 9:
        bad = int(np.argmax(labels > 9))
        raise DataError(f"{source}: label {labels[bad]} out of range at byte offset {bad * CIFAR_RECORD}")
    images = rec[:, 1:].reshape(-1, 3, 32, 32)
    return images, labels


def load_cifar10(directory, stats=None) -> tuple[Dataset, Dataset]:
    d = Path(directory)
    if (d / "cifar-10-batches-bin").is_dir():
        d = d / "cifar-10-batches-bin"
    parts = [read_cifar_batch((d / f"data_batch_{i}.bin").read_bytes(), f"data_batch_{i}.bin") for i in range(1, 6)]
    train_x = np.concatenate([p[0] for p in parts])
    train_y = np.concatenate([p[1] for p in parts])
    test_x, test_y = read_cifar_batch((d / "test_batch.bin").read_bytes(), "test_batch.bin")
    return _make_pair(
        "cifar10", train_x.astype(DTYPE) / 255.0, train_y, test_x.astype(DTYPE) / 255.0, test_y, 10, stats
    )


# --------------------------------------------------------------------------
# synthetic
# --------------------------------------------------------------------------


def make_synthetic(
    n_train: int = 1000,
    n_test: int = 500,
    classes: int = 10,
    shape=(1, 12, 12),
    noise: float = 0.35,
    seed: int = 0,
    stats=None,
) -> tuple[Dataset, Dataset]:
    """Seeded Gaussian-blob images: each class is a fixed random template plus noise.

    Pixel values are squashed into [0, 1] with a logistic so the pipeline
    matches the real loaders.
    """
    rng = Rng(seed)
    c, h, w = shape
    templates = rng.normal(classes * c * h * w).reshape(classes, c, h, w)
    # smooth templates so spatial structure (and max-pooling) matters
    k = np.array([0.25, 0.5, 0.25])
    for axis in (2, 3):
        templates = np.apply_along_axis(lambda v: np.convolve(v, k, mode="same"), axis, templates)
    templates *= 2.0

    def draw(n, split_key):
        r = rng.spawn(split_key)
        labels = (np.arange(n) % classes)[r.permutation(n)]
        x = templates[labels] + noise * r.normal(n * c * h * w).reshape(n, c, h, w) * 2.0
        return (1.0 / (1.0 + np.exp(-x))).astype(DTYPE), labels.astype(np.int64)

    train_raw, train_y = draw(n_train, 1)
    test_raw, test_y = draw(n_test, 2)
    return _make_pair("synthetic", train_raw, train_y, test_raw, test_y, classes, stats)


SYNTHETIC_OPTIONS = ("n_train", "n_test", "classes", "shape", "noise", "seed")


def load_dataset(desc: dict, stats=None) -> tuple[Dataset, Dataset]:
    """Load from a descriptor such as ``{"kind": "mnist", "path": "..."}``."""
    kind = desc.get("kind")
    if kind == "mnist":
        train, test = load_mnist(desc["path"], stats)
    elif kind == "cifar10":
        train, test = load_cifar10(desc["path"], stats)
    elif kind == "synthetic":
        opts = {k: v for k, v in desc.items() if k not in ("kind", "train_limit", "test_limit")}
        unknown = set(opts) - set(SYNTHETIC_OPTIONS)
        if unknown:
            raise DataError(f"dataset.{sorted(unknown)[0]}: unknown synthetic option")
        if "shape" in opts:
            opts["shape"] = tuple(opts["shape"])
        train, test = make_synthetic(stats=stats, **opts)
    else:
        raise DataError(f"dataset.kind: unknown dataset kind {kind!r}")
    if "train_limit" in desc:
        train = train.subset(int(desc["train_limit"]))
    if "test_limit" in desc:
        test = test.subset(int(desc["test_limit"]))
    return train, test


def detect_dataset(path) -> dict:
    """Descriptor for a directory (MNIST or CIFAR-10) or a JSON descriptor file."""
    p = Path(path)
    if p.is_file():
        return json.loads(p.read_text())
    names = {q.name for q in p.iterdir()} if p.is_dir() else set()
    if any(n.startswith("train-images-idx3-ubyte") for n in names):
        return {"kind": "mnist", "path": str(p)}
    if "data_batch_1.bin" in names or "cifar-10-batches-bin" in names:
        return {"kind": "cifar10", "path": str(p)}
    raise DataError(f"{path}: not an MNIST or CIFAR-10 directory, nor a dataset descriptor file")


def image_checksum(img: np.ndarray) -> str:
    """SHA-256 of an image's float32 bytes (golden-value checks)."""
    return hashlib.sha256(np.ascontiguousarray(img, dtype=DTYPE).tobytes()).hexdigest()


# --------------------------------------------------------------------------
# augmentation
# --------------------------------------------------------------------------


def flip(batch: np.ndarray, mask: np.ndarray) -> np.ndarray:
    out = batch.copy()
    out[mask] = out[mask][..., ::-1]
    return out


def random_crop(batch: np.ndarray, pad: int, offsets: np.ndarray, fill=None) -> np.ndarray:
    """Pad by ``pad`` on each side with ``fill`` (per channel, default 0) and crop
    each sample back to its size at ``offsets[i] = (dy, dx)``."""
    n, c, h, w = batch.shape
    padded = np.pad(batch, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    if fill is not None:
        border = np.ones((h + 2 * pad, w + 2 * pad), dtype=bool)
        border[pad : pad + h, pad : pad + w] = False
        padded[:, :, border] = np.asarray(fill, dtype=batch.dtype).reshape(1, c, 1)
    out = np.empty_like(batch)
    for i, (dy, dx) in enumerate(offsets):
        out[i] = padded[i, :, dy : dy + h, dx : dx + w]
    return out


def augment(batch: np.ndarray, rng: Rng, pad: int = 0, flip_p: float = 0.5, fill=None) -> np.ndarray:
    """Per-sample horizontal flip with probability ``flip_p`` and, when
    ``pad > 0``, pad-and-random-crop back to the original size.

    ``fill`` is the per-channel padding value; for normalized images pass
    :meth:`Dataset.zero_level` so the border is a black (raw 0) pixel.
    """
    n = batch.shape[0]
    out = flip(batch, rng.uniform(n) < flip_p) if flip_p > 0 else batch
    if pad:
        offsets = rng.integers(0, 2 * pad + 1, size=(n, 2))
        out = random_crop(out, pad, offsets, fill)
    return out


def augmentation_for(name: str) -> dict:
    """Standard recipe per dataset.

    CIFAR-10: pad 4 + random crop + horizontal flip. MNIST: flip only.
    Synthetic data: none. A training config may override the recipe.
    """
    if name == "cifar10":
        return {"pad": 4, "flip_p": 0.5}
    if name == "mnist":
        return {"pad": 0, "flip_p": 0.5}
    return {"pad": 0, "flip_p": 0.0}
