"""MNIST IDX parsing and deterministic batching."""

from __future__ import annotations

import gzip
import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801
GZIP_MAGIC = b"\x1f\x8b"

MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}
VALIDATION_SIZE = 10_000


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class Dataset:
    images: np.ndarray  # [n, 1, 28, 28], values in [0, 1]
    labels: np.ndarray  # [n] int64 in [0, 9]
    split_tag: str

    def __post_init__(self) -> None:
        if len(self.images) != len(self.labels):
            raise DataError(f"{len(self.images)} images but {len(self.labels)} labels")

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, index, split_tag: str | None = None) -> "Dataset":
        return Dataset(self.images[index], self.labels[index], split_tag or self.split_tag)

    def limit(self, k: int | None) -> "Dataset":
        return self if k is None or k >= len(self) else self.subset(slice(0, k))


def _read_bytes(path: str | os.PathLike) -> bytes:
    raw = Path(path).read_bytes()
    if raw[:2] == GZIP_MAGIC:
        raw = gzip.decompress(raw)
    return raw


def parse_idx(raw: bytes, expected_magic: int) -> np.ndarray:
    """Parse an unsigned-byte IDX payload into an array shaped by its header."""
    if len(raw) < 8:
        raise DataError("truncated IDX header")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise DataError(f"bad magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise DataError("truncated IDX header")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    n = int(np.prod(dims))
    payload = raw[header:]
    if len(payload) != n:
        raise DataError(f"payload has {len(payload)} bytes, header promises {n}")
    return np.frombuffer(payload, dtype=np.uint8).reshape(dims)


def serialize_idx(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr, dtype=np.uint8)
    magic = 0x00000800 | arr.ndim
    return struct.pack(f">I{arr.ndim}I", magic, *arr.shape) + arr.tobytes()


def load_idx(images_path, labels_path, split_tag: str = "train") -> Dataset:
    pixels = parse_idx(_read_bytes(images_path), IMAGE_MAGIC)
    labels = parse_idx(_read_bytes(labels_path), LABEL_MAGIC)
    if pixels.ndim != 3:
        raise DataError(f"image file must be rank 3, got {pixels.ndim}")
    if len(pixels) != len(labels):
        raise DataError(f"count mismatch: {len(pixels)} images vs {len(labels)} labels")
    if labels.size and labels.max() > 9:
        raise DataError("labels must lie in [0, 9]")
    images = (pixels.astype(np.float64) / 255.0)[:, None, :, :]
    return Dataset(images, labels.astype(np.int64), split_tag)


def _find(data_dir: Path, stem: str) -> Path:
    for name in (stem, stem + ".gz", stem.replace("-idx", ".idx")):
        p = data_dir / name
        if p.exists():
            return p
    raise DataError(f"missing {stem} under {data_dir}")


def load_mnist(data_dir, split: str, validation: bool = False) -> Dataset:
    """Load a split from ``data_dir``.

    ``validation=True`` carves the last 10,000 training images off as a
    ``val`` split, leaving 50,000 for ``train``.
    """
    data_dir = Path(data_dir)
    if split == "val":
        full = load_mnist(data_dir, "train")
        return full.subset(slice(len(full) - VALIDATION_SIZE, None), "val")
    if split not in MNIST_FILES:
        raise DataError(f"unknown split {split!r}")
    img, lbl = MNIST_FILES[split]
    ds = load_idx(_find(data_dir, img), _find(data_dir, lbl), split)
    if split == "train" and validation:
        ds = ds.subset(slice(0, len(ds) - VALIDATION_SIZE), "train")
    return ds


def pixel_mean(ds: Dataset) -> float:
    return float(ds.images.mean())


def centered(images: np.ndarray, mean: float, dtype=np.float64) -> np.ndarray:
    return (images - mean).astype(dtype, copy=False)


def epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch]).permutation(n)


def batches(ds: Dataset, batch_size: int, seed: int, epoch: int) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Shuffled ``(images, labels)`` batches; the order depends only on (seed, epoch)."""
    if batch_size < 1:
        raise DataError("batch_size must be >= 1")
    if len(ds) == 0:
        raise DataError("empty dataset")
    order = epoch_order(len(ds), seed, epoch)
    for start in range(0, len(order), batch_size):
        idx = order[start : start + batch_size]
        yield ds.images[idx], ds.labels[idx]
