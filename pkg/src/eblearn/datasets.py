"""Image-classification data: file parsers, normalisation, padding, flips, batching.

Supported containers:

* IDX (MNIST, Fashion-MNIST): big-endian, magic 2051 for images and 2049
  for labels, optionally gzip-compressed.
* CIFAR binary records: 1 label byte + 3072 pixel bytes (CIFAR-10) or
  coarse + fine label bytes + 3072 pixel bytes (CIFAR-100).
* Raw tensor files (used for SVHN): the 4-byte magic ``b"EBLR"``, then
  big-endian ``uint32`` count, channels, height, width, followed by the
  channel-major ``uint8`` pixels of every image and one ``uint8`` label per
  image.
"""
from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np

from .exceptions import FormatError, ShapeError

__all__ = [
    "NormalizationSpec",
    "NORMALIZATION",
    "DATASETS",
    "Dataset",
    "load_idx",
    "read_idx",
    "write_idx",
    "load_cifar_binary",
    "load_raw",
    "write_raw",
    "load_dataset",
    "preprocess",
    "denormalize",
    "augment_flip",
    "batches",
]

IDX_IMAGES = 2051
IDX_LABELS = 2049
RAW_MAGIC = b"EBLR"
CIFAR_PIXELS = 3 * 32 * 32


@dataclass(frozen=True)
class NormalizationSpec:
    mean: tuple
    std: tuple

    def __post_init__(self):
        object.__setattr__(self, "mean", tuple(float(m) for m in np.atleast_1d(self.mean)))
        object.__setattr__(self, "std", tuple(float(s) for s in np.atleast_1d(self.std)))
        if len(self.mean) != len(self.std):
            raise ValueError("mean and std need one value per channel")
        if min(self.std) <= 0:
            raise ValueError("std must be positive")

    @property
    def channels(self) -> int:
        return len(self.mean)

    def _arrays(self, dtype):
        shape = (-1, 1, 1)
        return (np.asarray(self.mean, dtype=dtype).reshape(shape),
                np.asarray(self.std, dtype=dtype).reshape(shape))


NORMALIZATION = {
    "mnist": NormalizationSpec((0.1307,), (0.3081,)),
    "fashion-mnist": NormalizationSpec((0.2860,), (0.3530,)),
    "svhn": NormalizationSpec((0.4377, 0.4438, 0.4728), (0.1980, 0.2010, 0.1970)),
    "cifar10": NormalizationSpec((0.4914, 0.4822, 0.4465),
                                 (3 * 0.2023, 3 * 0.1994, 3 * 0.2010)),
    "cifar100": NormalizationSpec((0.5071, 0.4867, 0.4408), (0.2675, 0.2565, 0.2761)),
}

# name -> (input channels, classes, pad 28 -> 32, flip during training)
DATASETS = {
    "mnist": (1, 10, True, False),
    "fashion-mnist": (1, 10, True, True),
    "svhn": (3, 10, False, False),
    "cifar10": (3, 10, False, True),
    "cifar100": (3, 100, False, True),
}


@dataclass
class Dataset:
    """Raw ``uint8`` images ``(N, C, H, W)`` with integer labels."""

    images: np.ndarray
    labels: np.ndarray
    name: str = ""

    def __post_init__(self):
        self.images = np.asarray(self.images)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim == 3:
            self.images = self.images[:, None]
        if self.images.ndim != 4:
            raise ShapeError(f"images must be (N, C, H, W), got {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise FormatError(f"{len(self.images)} images but {len(self.labels)} labels")

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, limit: Optional[int] = None, start: int = 0) -> "Dataset":
        stop = None if limit is None else start + limit
        return Dataset(self.images[start:stop], self.labels[start:stop], self.name)


def _open(path) -> bytes:
    path = Path(path)
    data = path.read_bytes()
    if path.suffix == ".gz":
        data = gzip.decompress(data)
    return data


def read_idx(data: bytes, expected_magic: Optional[int] = None) -> np.ndarray:
    """Parse an unsigned-byte IDX container into an array."""
    if len(data) < 4:
        raise FormatError("file too short for an IDX header")
    magic = struct.unpack(">I", data[:4])[0]
    if expected_magic is not None and magic != expected_magic:
        raise FormatError(f"bad IDX magic {magic}, expected {expected_magic}")
    if magic >> 8 != 0x08:
        raise FormatError(f"unsupported IDX element type in magic {magic}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(data) < header:
        raise FormatError("truncated IDX header")
    dims = struct.unpack(f">{ndim}I", data[4:header])
    size = int(np.prod(dims))
    if len(data) != header + size:
        raise FormatError(f"IDX body has {len(data) - header} bytes, header promises {size}")
    return np.frombuffer(data, dtype=np.uint8, offset=header).reshape(dims)


def write_idx(path, array: np.ndarray) -> None:
    """Write a ``uint8`` array as an IDX file (gzip-compressed for ``.gz`` paths)."""
    array = np.asarray(array)
    if array.dtype != np.uint8:
        raise FormatError("only uint8 IDX files are supported")
    data = struct.pack(">I", (0x08 << 8) | array.ndim)
    data += struct.pack(f">{array.ndim}I", *array.shape) + array.tobytes()
    path = Path(path)
    if path.suffix == ".gz":
        data = gzip.compress(data, mtime=0)
    path.write_bytes(data)


def load_idx(images_path, labels_path, name: str = "") -> Dataset:
    images = read_idx(_open(images_path), IDX_IMAGES)
    labels = read_idx(_open(labels_path), IDX_LABELS)
    if len(images) != len(labels):
        raise FormatError(f"{len(images)} images but {len(labels)} labels")
    return Dataset(images, labels, name)


def load_cifar_binary(paths: Sequence, fine_labels: Optional[bool] = None,
                      name: str = "") -> Dataset:
    """Read CIFAR binary batches.

    ``fine_labels=None`` reads CIFAR-10 records; ``True``/``False`` read
    CIFAR-100 records and keep the fine/coarse label.
    """
    if isinstance(paths, (str, Path)):
        paths = [paths]
    n_label = 1 if fine_labels is None else 2
    record = n_label + CIFAR_PIXELS
    images, labels = [], []
    for path in paths:
        data = _open(path)
        if not data or len(data) % record:
            raise FormatError(f"{path}: size {len(data)} is not a multiple of {record}")
        rows = np.frombuffer(data, dtype=np.uint8).reshape(-1, record)
        labels.append(rows[:, 1 if fine_labels else 0])
        images.append(rows[:, n_label:].reshape(-1, 3, 32, 32))
    return Dataset(np.concatenate(images), np.concatenate(labels), name)


def write_raw(path, dataset: Dataset) -> None:
    n, c, h, w = dataset.images.shape
    body = struct.pack(">4I", n, c, h, w)
    labels = dataset.labels.astype(np.uint8)
    Path(path).write_bytes(RAW_MAGIC + body + dataset.images.astype(np.uint8).tobytes()
                           + labels.tobytes())


def load_raw(path, name: str = "") -> Dataset:
    data = _open(path)
    if data[:4] != RAW_MAGIC:
        raise FormatError(f"{path}: bad raw-tensor magic")
    if len(data) < 20:
        raise FormatError(f"{path}: truncated header")
    n, c, h, w = struct.unpack(">4I", data[4:20])
    pixels = n * c * h * w
    if len(data) != 20 + pixels + n:
        raise FormatError(f"{path}: expected {20 + pixels + n} bytes, found {len(data)}")
    images = np.frombuffer(data, dtype=np.uint8, count=pixels, offset=20).reshape(n, c, h, w)
    labels = np.frombuffer(data, dtype=np.uint8, offset=20 + pixels)
    return Dataset(images, labels, name)


def _first_existing(root: Path, names: Sequence[str]) -> Path:
    for name in names:
        for candidate in (root / name, root / (name + ".gz")):
            if candidate.exists():
                return candidate
    raise FileNotFoundError(f"none of {list(names)} found under {root}")


def _dataset_root(data_dir, name: str) -> Path:
    data_dir = Path(data_dir)
    if not data_dir.is_dir():
        raise FileNotFoundError(f"data directory {data_dir} does not exist")
    sub = data_dir / name
    return sub if sub.is_dir() else data_dir


def load_dataset(name: str, data_dir, split: str = "train") -> Dataset:
    """Load a split of a named dataset from its conventional file names.

    Files are looked up in ``data_dir/<name>/`` and then in ``data_dir``.
    """
    if name not in DATASETS:
        raise ValueError(f"unknown dataset {name!r}; choose from {sorted(DATASETS)}")
    if split not in ("train", "test"):
        raise ValueError("split must be 'train' or 'test'")
    root = _dataset_root(data_dir, name)
    if name in ("mnist", "fashion-mnist"):
        prefix = "train" if split == "train" else "t10k"
        images = _first_existing(root, [f"{prefix}-images-idx3-ubyte", f"{prefix}-images.idx3-ubyte"])
        labels = _first_existing(root, [f"{prefix}-labels-idx1-ubyte", f"{prefix}-labels.idx1-ubyte"])
        return load_idx(images, labels, name)
    if name == "cifar10":
        base = root / "cifar-10-batches-bin" if (root / "cifar-10-batches-bin").is_dir() else root
        files = ([f"data_batch_{i}.bin" for i in range(1, 6)] if split == "train"
                 else ["test_batch.bin"])
        return load_cifar_binary([_first_existing(base, [f]) for f in files], None, name)
    if name == "cifar100":
        base = root / "cifar-100-binary" if (root / "cifar-100-binary").is_dir() else root
        return load_cifar_binary([_first_existing(base, [f"{split}.bin"])], True, name)
    return load_raw(_first_existing(root, [f"{split}.raw"]), name)


def preprocess(raw: np.ndarray, spec: NormalizationSpec, pad_to_32: bool = False,
               dtype=np.float32) -> np.ndarray:
    """Scale ``uint8`` pixels to [0, 1], normalise per channel, then zero-pad.

    Accepts one image ``(C, H, W)`` or a batch ``(N, C, H, W)``. Padding adds
    two pixels on every side and is applied after normalisation.
    """
    raw = np.asarray(raw)
    if raw.ndim not in (3, 4):
        raise ShapeError(f"expected (C, H, W) or (N, C, H, W), got {raw.shape}")
    if raw.shape[-3] != spec.channels:
        raise ShapeError(f"image has {raw.shape[-3]} channels, normalisation has {spec.channels}")
    mean, std = spec._arrays(np.float64)
    out = ((raw.astype(np.float64) / 255.0 - mean) / std).astype(dtype)
    if pad_to_32:
        pad = [(0, 0)] * (raw.ndim - 2) + [(2, 2), (2, 2)]
        out = np.pad(out, pad)
    return out


def denormalize(x: np.ndarray, spec: NormalizationSpec, padded: bool = False) -> np.ndarray:
    """Inverse of :func:`preprocess` back to [0, 1] pixel values."""
    x = np.asarray(x, dtype=np.float64)
    if padded:
        x = x[..., 2:-2, 2:-2]
    mean, std = spec._arrays(np.float64)
    return x * std + mean


def augment_flip(image: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Reverse the width axis with probability 1/2 (per image for a batch)."""
    image = np.asarray(image)
    if image.ndim == 4:
        flip = rng.random(len(image)) < 0.5
        out = image.copy()
        out[flip] = out[flip][..., ::-1]
        return out
    return image[..., ::-1].copy() if rng.random() < 0.5 else image.copy()


def batches(dataset: Dataset, batch_size: int, shuffle_seed: Optional[int] = None
            ) -> Iterator[tuple]:
    """Yield ``(images, labels)`` batches; the final partial batch is kept.

    A ``shuffle_seed`` permutes the order (``None`` keeps file order).
    """
    if batch_size < 1:
        raise ValueError("batch_size must be at least 1")
    n = len(dataset)
    if n == 0:
        raise ValueError("cannot batch an empty dataset")
    order = (np.arange(n) if shuffle_seed is None
             else np.random.default_rng(shuffle_seed).permutation(n))
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        yield dataset.images[idx], dataset.labels[idx]
