import gzip
import hashlib
import struct
from pathlib import Path

import numpy as np
import pytest

from hwgq.data import (
    CIFAR_RECORD,
    IDX_IMAGES,
    IDX_LABELS,
    DataError,
    augment,
    augmentation_for,
    detect_dataset,
    flip,
    load_cifar10,
    load_dataset,
    load_mnist,
    make_synthetic,
    random_crop,
    read_cifar_batch,
    read_idx,
)
from hwgq.tensor import Rng
from tests.oracles import frozen

MNIST10K = Path(__file__).parent / "data" / "mnist10k"


def idx_bytes(arr: np.ndarray, magic: int) -> bytes:
    return struct.pack(">I", magic) + struct.pack(f">{arr.ndim}I", *arr.shape) + arr.astype(np.uint8).tobytes()


# IDX ------------------------------------------------------------------------


def test_idx_round_trip():
    a = np.arange(2 * 3 * 4, dtype=np.uint8).reshape(2, 3, 4)
    assert np.array_equal(read_idx(idx_bytes(a, IDX_IMAGES), IDX_IMAGES), a)


def test_idx_bad_magic_names_offset():
    data = idx_bytes(np.zeros(3, np.uint8), IDX_LABELS)
    with pytest.raises(DataError, match="byte offset 0"):
        read_idx(data, IDX_IMAGES, "x")


def test_idx_truncated_names_offset():
    data = idx_bytes(np.zeros((2, 2, 2), np.uint8), IDX_IMAGES)
    with pytest.raises(DataError, match=f"byte offset {len(data) - 3}"):
        read_idx(data[:-3], IDX_IMAGES)
    with pytest.raises(DataError, match="truncated header"):
        read_idx(data[:6], IDX_IMAGES)


def _write_mnist(d: Path, n_train=6, n_test=4, gz=False):
    r = np.random.default_rng(0)
    for prefix, n in (("train", n_train), ("t10k", n_test)):
        files = {
            f"{prefix}-images-idx3-ubyte": idx_bytes(r.integers(0, 256, (n, 28, 28)), IDX_IMAGES),
            f"{prefix}-labels-idx1-ubyte": idx_bytes(np.arange(n) % 10, IDX_LABELS),
        }
        for name, data in files.items():
            if gz:
                (d / (name + ".gz")).write_bytes(gzip.compress(data))
            else:
                (d / name).write_bytes(data)


@pytest.mark.parametrize("gz", [False, True])
def test_load_mnist_layout_and_normalization(tmp_path, gz):
    _write_mnist(tmp_path, gz=gz)
    tr, te = load_mnist(tmp_path)
    assert tr.images.shape == (6, 1, 28, 28) and te.images.shape == (4, 1, 28, 28)
    assert tr.images.dtype == np.float32
    assert abs(float(tr.images.mean())) < 1e-5 and abs(float(tr.images.std()) - 1) < 1e-4
    # the test split is normalized with train statistics
    assert np.array_equal(te.mean, tr.mean)
    assert detect_dataset(tmp_path) == {"kind": "mnist", "path": str(tmp_path)}


def test_load_mnist_count_mismatch(tmp_path):
    _write_mnist(tmp_path)
    (tmp_path / "t10k-labels-idx1-ubyte").write_bytes(idx_bytes(np.zeros(3), IDX_LABELS))
    with pytest.raises(DataError, match="4 images but 3 labels"):
        load_mnist(tmp_path)


def test_load_mnist_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_mnist(tmp_path)


def test_bundled_mnist_golden_values():
    tr, te = load_mnist(MNIST10K)
    assert (len(tr), len(te)) == (8000, 2000)
    for ds in (tr, te):
        raw = np.rint(ds.denormalize()[0, 0] * 255).astype(np.uint8)
        assert hashlib.sha256(raw.tobytes()).hexdigest() == frozen.MNIST10K_FIRST_IMAGE_SHA256[ds.split]
        assert ds.labels[:5].tolist() == frozen.MNIST10K_FIRST_LABELS[ds.split]
    assert np.bincount(tr.labels).min() > 600


def test_normalization_inverse():
    tr, _ = load_mnist(MNIST10K)
    back = tr.denormalize()[:50]
    assert back.min() >= -1e-6 and back.max() <= 1 + 1e-6
    # raw pixels are k/255
    assert np.abs(back * 255 - np.rint(back * 255)).max() < 1e-3


# CIFAR-10 -------------------------------------------------------------------


def _cifar_bytes(n, seed=0):
    r = np.random.default_rng(seed)
    rec = r.integers(0, 256, (n, CIFAR_RECORD)).astype(np.uint8)
    rec[:, 0] = np.arange(n) % 10
    return rec.tobytes()


def test_cifar_record_layout():
    data = _cifar_bytes(3)
    images, labels = read_cifar_batch(data)
    assert images.shape == (3, 3, 32, 32) and labels.tolist() == [0, 1, 2]
    # channel planes are stored R, G, B row-major
    assert images[1, 2, 0, 0] == data[CIFAR_RECORD + 1 + 2 * 1024]


def test_cifar_partial_record_offset():
    data = _cifar_bytes(2)[:-10]
    with pytest.raises(DataError, match=f"byte offset {CIFAR_RECORD}"):
        read_cifar_batch(data)


def test_cifar_bad_label_offset():
    data = bytearray(_cifar_bytes(3))
    data[2 * CIFAR_RECORD] = 11
    with pytest.raises(DataError, match=f"label 11 .* byte offset {2 * CIFAR_RECORD}"):
        read_cifar_batch(bytes(data))


def test_load_cifar10(tmp_path):
    sub = tmp_path / "cifar-10-batches-bin"
    sub.mkdir()
    for i in range(1, 6):
        (sub / f"data_batch_{i}.bin").write_bytes(_cifar_bytes(4, i))
    (sub / "test_batch.bin").write_bytes(_cifar_bytes(5, 9))
    tr, te = load_cifar10(tmp_path)
    assert tr.images.shape == (20, 3, 32, 32) and len(te) == 5
    assert tr.mean.shape == (3,)
    assert detect_dataset(tmp_path)["kind"] == "cifar10"


# synthetic and descriptors ----------------------------------------------------


def test_synthetic_deterministic_and_balanced():
    a, _ = make_synthetic(100, 50, seed=3)
    b, _ = make_synthetic(100, 50, seed=3)
    c, _ = make_synthetic(100, 50, seed=4)
    assert np.array_equal(a.images, b.images) and np.array_equal(a.labels, b.labels)
    assert not np.array_equal(a.images, c.images)
    assert np.bincount(a.labels).tolist() == [10] * 10


def test_load_dataset_limits_and_unknown_kind():
    tr, te = load_dataset({"kind": "synthetic", "n_train": 40, "n_test": 20, "train_limit": 10, "shape": [1, 6, 6]})
    assert len(tr) == 10 and len(te) == 20 and tr.images.shape[1:] == (1, 6, 6)
    with pytest.raises(DataError, match="unknown dataset kind"):
        load_dataset({"kind": "imagenet"})


def test_detect_dataset_rejects_other_dirs(tmp_path):
    with pytest.raises(DataError):
        detect_dataset(tmp_path)


# augmentation ----------------------------------------------------------------


def test_flip_is_involution():
    x = Rng(1).normal(4 * 2 * 3 * 5).reshape(4, 2, 3, 5)
    mask = np.array([True, False, True, True])
    assert np.array_equal(flip(flip(x, mask), mask), x)
    assert np.array_equal(flip(x, mask)[0], x[0, :, :, ::-1])
    assert np.array_equal(flip(x, mask)[1], x[1])


def test_crop_offsets():
    x = np.arange(16, dtype=np.float32).reshape(1, 1, 4, 4)
    assert np.array_equal(random_crop(x, 2, np.array([[2, 2]])), x)
    shifted = random_crop(x, 1, np.array([[0, 0]]), fill=[-1.0])
    assert shifted[0, 0, 0].tolist() == [-1, -1, -1, -1]
    assert shifted[0, 0, 1].tolist() == [-1, 0, 1, 2]
    right = random_crop(x, 1, np.array([[1, 2]]))
    assert right[0, 0, :, -1].tolist() == [0, 0, 0, 0]
    assert right[0, 0, 0, :3].tolist() == [1, 2, 3]


def test_augment_deterministic_per_stream():
    x = Rng(2).normal(8 * 3 * 6 * 6).reshape(8, 3, 6, 6).astype(np.float32)
    a = augment(x, Rng(5).spawn(2, 7), pad=2)
    b = augment(x, Rng(5).spawn(2, 7), pad=2)
    c = augment(x, Rng(5).spawn(2, 8), pad=2)
    assert np.array_equal(a, b) and not np.array_equal(a, c)
    assert a.shape == x.shape


def test_augment_without_flip_or_pad_is_identity():
    x = Rng(3).normal(50).reshape(2, 1, 5, 5)
    assert np.array_equal(augment(x, Rng(0), pad=0, flip_p=0.0), x)


def test_augment_flip_rate():
    x = np.arange(4, dtype=np.float32).reshape(1, 1, 1, 4).repeat(4000, 0)
    out = augment(x, Rng(9), flip_p=0.5)
    rate = (out[:, 0, 0, 0] == 3).mean()
    assert 0.46 < rate < 0.54


def test_recipes():
    assert augmentation_for("cifar10") == {"pad": 4, "flip_p": 0.5}
    assert augmentation_for("mnist") == {"pad": 0, "flip_p": 0.5}
    assert augmentation_for("synthetic")["flip_p"] == 0.0


def test_unknown_synthetic_option():
    with pytest.raises(DataError, match=r"dataset\.size"):
        load_dataset({"kind": "synthetic", "size": 3})


def test_crop_offsets_in_range_for_pad_4():
    # every pixel is distinct, so each output pins down its crop offset
    x = np.arange(64 * 3 * 32 * 32, dtype=np.float32).reshape(64, 3, 32, 32)
    out = augment(x, Rng(11), pad=4, flip_p=0.0, fill=[-1.0] * 3)
    padded = np.pad(x, ((0, 0), (0, 0), (4, 4), (4, 4)), constant_values=-1.0)
    seen = set()
    for i in range(64):
        hits = [(dy, dx) for dy in range(9) for dx in range(9) if np.array_equal(padded[i, :, dy : dy + 32, dx : dx + 32], out[i])]
        assert len(hits) == 1
        seen.add(hits[0])
    assert len(seen) > 20


def test_augment_preserves_shape_and_dtype():
    x = Rng(12).normal(5 * 3 * 32 * 32).reshape(5, 3, 32, 32).astype(np.float32)
    out = augment(x, Rng(1), **augmentation_for("cifar10"))
    assert out.shape == x.shape and out.dtype == x.dtype
