"""Dataset readers (MNIST IDX, CIFAR binary, bundled digits) and augmentation.

Images come out as float32 N x C x H x W in [0, 1]; labels as int64.
"""

from __future__ import annotations

import gzip
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError

IDX_IMAGES = 0x00000803
IDX_LABELS = 0x00000801

CIFAR_RECORD = 1 + 3072

STATS = {
    "mnist_idx": ((0.1307,), (0.3081,)),
    "cifar10": ((0.4914, 0.4822, 0.4465), (0.2470, 0.2435, 0.2616)),
    "cifar100": ((0.5071, 0.4865, 0.4409), (0.2673, 0.2564, 0.2762)),
}


@dataclass
class Split:
    images: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __len__(self):
        return len(self.labels)

    def subset(self, n):
        if not n or n >= len(self):
            return self
        return Split(self.images[:n], self.labels[:n], self.num_classes)


@dataclass
class Dataset:
    train: Split
    test: Split
    mean: tuple
    std: tuple
    name: str

    @property
    def input_shape(self):
        return tuple(self.train.images.shape[1:])

    @property
    def num_classes(self):
        return self.train.num_classes


# -- IDX ------------------------------------------------------------------------

def _read_bytes(path) -> bytes:
    path = Path(path)
    raw = path.read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def parse_idx(buf: bytes) -> np.ndarray:
    """Decode an IDX buffer, dispatching on its magic number."""
    if len(buf) < 4:
        raise FormatError("IDX header truncated", 0)
    (magic,) = struct.unpack_from(">I", buf, 0)
    if magic == IDX_IMAGES:
        return parse_idx_images(buf)
    if magic == IDX_LABELS:
        return parse_idx_labels(buf)
    raise FormatError(f"unsupported IDX magic 0x{magic:08x}", 0)


def _idx_payload(buf, expected_magic, ndim):
    if len(buf) < 4 + 4 * ndim:
        raise FormatError("IDX header truncated", len(buf))
    (magic,) = struct.unpack_from(">I", buf, 0)
    if magic != expected_magic:
        raise FormatError(f"bad IDX magic 0x{magic:08x}, expected 0x{expected_magic:08x}", 0)
    dims = struct.unpack_from(f">{ndim}I", buf, 4)
    start = 4 + 4 * ndim
    need = int(np.prod(dims))
    if len(buf) - start < need:
        raise FormatError(f"IDX payload truncated: need {need} bytes, have {len(buf) - start}", len(buf))
    return np.frombuffer(buf, dtype=np.uint8, count=need, offset=start).reshape(dims)


def parse_idx_images(buf: bytes) -> np.ndarray:
    """uint8 array of shape (N, rows, cols)."""
    return _idx_payload(buf, IDX_IMAGES, 3)


def parse_idx_labels(buf: bytes) -> np.ndarray:
    return _idx_payload(buf, IDX_LABELS, 1)


def encode_idx_images(images: np.ndarray) -> bytes:
    images = np.asarray(images, dtype=np.uint8)
    return struct.pack(">IIII", IDX_IMAGES, *images.shape) + images.tobytes()


def encode_idx_labels(labels: np.ndarray) -> bytes:
    labels = np.asarray(labels, dtype=np.uint8)
    return struct.pack(">II", IDX_LABELS, labels.size) + labels.tobytes()


def _find(root: Path, *names):
    for name in names:
        for cand in (root / name, root / (name + ".gz")):
            if cand.exists():
                return cand
    raise FileNotFoundError(f"none of {', '.join(names)} found under {root}")


def _mnist_split(root, prefix, num_classes=10):
    img_path = _find(root, f"{prefix}-images-idx3-ubyte", f"{prefix}-images.idx3-ubyte")
    lab_path = _find(root, f"{prefix}-labels-idx1-ubyte", f"{prefix}-labels.idx1-ubyte")
    images = parse_idx_images(_read_bytes(img_path))
    labels = parse_idx_labels(_read_bytes(lab_path))
    if len(images) != len(labels):
        raise FormatError(f"{img_path.name} has {len(images)} images but {lab_path.name} has {len(labels)} labels")
    bad = np.flatnonzero(labels >= num_classes)
    if bad.size:
        raise FormatError(f"label {labels[bad[0]]} out of range in {lab_path.name}", 8 + int(bad[0]))
    x = (images.astype(np.float32) / 255.0)[:, None, :, :]
    return Split(x, labels.astype(np.int64), num_classes)


# -- CIFAR binary ---------------------------------------------------------------

def parse_cifar_records(buf: bytes, label_bytes: int = 1, num_classes: int = 10):
    """Decode concatenated records of ``label_bytes`` label bytes + 3072 pixels.

    With two label bytes (CIFAR-100) the second (fine) label is used.
    """
    rec = label_bytes + 3072
    if len(buf) % rec:
        raise FormatError(f"CIFAR buffer of {len(buf)} bytes is not a whole number of {rec}-byte records",
                          len(buf) - len(buf) % rec)
    arr = np.frombuffer(buf, dtype=np.uint8).reshape(-1, rec)
    labels = arr[:, label_bytes - 1].astype(np.int64)
    bad = np.flatnonzero(labels >= num_classes)
    if bad.size:
        raise FormatError(f"label {labels[bad[0]]} out of range", int(bad[0]) * rec + label_bytes - 1)
    images = arr[:, label_bytes:].reshape(-1, 3, 32, 32).astype(np.float32) / 255.0
    return images, labels


def _cifar(root: Path):
    if (root / "train.bin").exists():
        tr = parse_cifar_records(_read_bytes(root / "train.bin"), 2, 100)
        te = parse_cifar_records(_read_bytes(root / "test.bin"), 2, 100)
        mean, std = STATS["cifar100"]
        k, name = 100, "cifar100"
    else:
        batches = sorted(root.glob("data_batch_*.bin"))
        if not batches:
            raise FileNotFoundError(f"no data_batch_*.bin or train.bin under {root}")
        parts = [parse_cifar_records(_read_bytes(p)) for p in batches]
        tr = (np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts]))
        te = parse_cifar_records(_read_bytes(_find(root, "test_batch.bin")))
        mean, std = STATS["cifar10"]
        k, name = 10, "cifar10"
    return Dataset(Split(tr[0], tr[1], k), Split(te[0], te[1], k), mean, std, name)


# -- digits ---------------------------------------------------------------------

DIGITS_TEST = 497
DIGITS_SPLIT_SEED = 20240601


def _digits():
    from sklearn.datasets import load_digits

    d = load_digits()
    x = (d.images.astype(np.float32) / 16.0)[:, None, :, :]
    y = d.target.astype(np.int64)
    order = np.random.default_rng(DIGITS_SPLIT_SEED).permutation(len(y))
    test, train = order[:DIGITS_TEST], order[DIGITS_TEST:]
    xtr = x[train]
    mean = (float(xtr.mean()),)
    std = (float(xtr.std()),)
    return Dataset(Split(xtr, y[train], 10), Split(x[test], y[test], 10), mean, std, "digits")


def resolve_data_path(path) -> Path:
    if path:
        return Path(path)
    env = os.environ.get("BINFREEZE_DATA_DIR")
    if env:
        return Path(env)
    raise FileNotFoundError("no dataset path given and BINFREEZE_DATA_DIR is unset")


def load_dataset(kind: str, path=None, train_subset: int = 0, test_subset: int = 0) -> Dataset:
    kind = kind.lower()
    if kind == "digits":
        ds = _digits()
    elif kind == "mnist_idx":
        root = resolve_data_path(path)
        if not root.exists():
            raise FileNotFoundError(f"dataset path {root} does not exist")
        mean, std = STATS["mnist_idx"]
        ds = Dataset(_mnist_split(root, "train"), _mnist_split(root, "t10k"), mean, std, "mnist")
    elif kind == "cifar_bin":
        root = resolve_data_path(path)
        if not root.exists():
            raise FileNotFoundError(f"dataset path {root} does not exist")
        ds = _cifar(root)
    else:
        raise FormatError(f"unknown dataset kind {kind!r}")
    ds.train = ds.train.subset(train_subset)
    ds.test = ds.test.subset(test_subset)
    return ds


# -- augmentation -----------------------------------------------------------------

def normalize(x: np.ndarray, mean, std) -> np.ndarray:
    m = np.asarray(mean, dtype=np.float32).reshape(1, -1, 1, 1)
    s = np.asarray(std, dtype=np.float32).reshape(1, -1, 1, 1)
    return ((x - m) / s).astype(np.float32)


def crop(padded: np.ndarray, top: int, left: int, h: int, w: int) -> np.ndarray:
    return padded[..., top : top + h, left : left + w]


def hflip(x: np.ndarray) -> np.ndarray:
    return x[..., ::-1]


def augment_normalize(x: np.ndarray, rng: np.random.Generator, mean, std, train: bool = True,
                      pad: int = 4, flip: bool = True) -> np.ndarray:
    """Zero-pad, random crop back to size, random horizontal flip, normalize.

    Eval batches (``train=False``) are only normalized.
    """
    if not train:
        return normalize(x, mean, std)
    n, c, h, w = x.shape
    out = np.empty_like(x)
    padded = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    tops = rng.integers(0, 2 * pad + 1, size=n)
    lefts = rng.integers(0, 2 * pad + 1, size=n)
    flips = rng.random(n) < 0.5 if flip else np.zeros(n, dtype=bool)
    for i in range(n):
        img = crop(padded[i], tops[i], lefts[i], h, w)
        out[i] = hflip(img) if flips[i] else img
    return normalize(out, mean, std)
