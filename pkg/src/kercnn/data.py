"""MNIST-family datasets: IDX files, splits, z-scoring and batching."""

from __future__ import annotations

import dataclasses
import gzip
import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

__all__ = [
    "Dataset",
    "IdxError",
    "read_idx",
    "write_idx",
    "load_idx",
    "save_idx_dataset",
    "load_dataset",
    "data_root",
    "split_train_val",
    "take",
    "zscore_fit_apply",
    "denormalize",
    "batches",
]

DATA_ROOT_ENV = "KERCNN_DATA"

# name -> (train images, train labels, test images, test labels); all three
# datasets ship under the same file names, so each lives in its own directory
REGISTRY: dict[str, tuple[str, str, str, str]] = {
    name: ("train-images-idx3-ubyte", "train-labels-idx1-ubyte", "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte")
    for name in ("mnist", "kmnist", "fashion")
}

_IDX_TYPES = {0x08: np.dtype(">u1"), 0x09: np.dtype(">i1"), 0x0B: np.dtype(">i2"), 0x0C: np.dtype(">i4"), 0x0D: np.dtype(">f4"), 0x0E: np.dtype(">f8")}
_IDX_CODES = {np.dtype("u1"): 0x08, np.dtype("i1"): 0x09, np.dtype("i2"): 0x0B, np.dtype("i4"): 0x0C, np.dtype("f4"): 0x0D, np.dtype("f8"): 0x0E}


class IdxError(ValueError):
    pass


@dataclass(frozen=True)
class Dataset:
    images: np.ndarray
    labels: np.ndarray
    stats: tuple[np.ndarray, np.ndarray] | None = None
    split: str = "train"
    name: str = ""

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise ValueError(f"{len(self.images)} images but {len(self.labels)} labels")
        if self.images.ndim != 4:
            raise ValueError("images must be (N, H, W, C)")

    def __len__(self) -> int:
        return len(self.labels)

    def replace(self, **kw) -> "Dataset":
        return dataclasses.replace(self, **kw)


# -------------------------------------------------------------------- IDX


def _open(path: Path):
    return gzip.open(path, "rb") if path.suffix == ".gz" else open(path, "rb")


def read_idx(path) -> np.ndarray:
    """Read an IDX file (optionally gzipped) into a native-endian array."""
    path = Path(path)
    with _open(path) as fh:
        raw = fh.read()
    if len(raw) < 4:
        raise IdxError(f"{path}: truncated header")
    zero, type_code, ndim = struct.unpack(">HBB", raw[:4])
    if zero != 0 or type_code not in _IDX_TYPES or ndim == 0:
        raise IdxError(f"{path}: bad magic number 0x{raw[:4].hex()}")
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise IdxError(f"{path}: truncated header")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    dtype = _IDX_TYPES[type_code]
    expected = int(np.prod(dims)) * dtype.itemsize
    if len(raw) - header != expected:
        raise IdxError(f"{path}: header declares {expected} data bytes, file has {len(raw) - header}")
    return np.frombuffer(raw, dtype=dtype, offset=header).reshape(dims).astype(dtype.newbyteorder("="))


def write_idx(path, array: np.ndarray) -> None:
    array = np.asarray(array)
    code = _IDX_CODES.get(array.dtype.newbyteorder("="))
    if code is None:
        raise IdxError(f"dtype {array.dtype} has no IDX encoding")
    path = Path(path)
    payload = struct.pack(">HBB", 0, code, array.ndim) + struct.pack(f">{array.ndim}I", *array.shape)
    payload += np.ascontiguousarray(array, dtype=_IDX_TYPES[code]).tobytes()
    if path.suffix == ".gz":
        with gzip.open(path, "wb") as fh:
            fh.write(payload)
    else:
        path.write_bytes(payload)


def load_idx(images_path, labels_path, split: str = "train", name: str = "") -> Dataset:
    """Raw dataset with pixels mapped to [0, 1] (uint8 files) and labels as int64."""
    images = read_idx(images_path)
    labels = read_idx(labels_path)
    if images.ndim not in (3, 4) or labels.ndim != 1:
        raise IdxError("expected rank-3/4 images and rank-1 labels")
    if len(images) != len(labels):
        raise IdxError(f"{len(images)} images but {len(labels)} labels")
    if images.dtype == np.uint8:
        images = images.astype(np.float64) / 255.0
    else:
        images = images.astype(np.float64)
    if images.ndim == 3:
        images = images[..., None]
    return Dataset(images, labels.astype(np.int64), None, split, name)


def save_idx_dataset(images_path, labels_path, ds: Dataset, as_bytes: bool = True) -> None:
    """Write a dataset back to IDX.

    ``as_bytes`` stores pixels as uint8 after denormalizing and clipping to
    [0, 1]; otherwise the raw float32 values are kept.
    """
    images = denormalize(ds) if ds.stats is not None else ds.images
    if as_bytes:
        images = np.round(np.clip(images, 0.0, 1.0) * 255.0).astype(np.uint8)
    else:
        images = images.astype(np.float32)
    if images.shape[-1] == 1:
        images = images[..., 0]
    write_idx(images_path, images)
    write_idx(labels_path, ds.labels.astype(np.uint8))


def data_root(root=None) -> Path:
    return Path(root or os.environ.get(DATA_ROOT_ENV, "data"))


def _find(directory: Path, stem: str) -> Path:
    for candidate in (directory / stem, directory / (stem + ".gz")):
        if candidate.exists():
            return candidate
    raise FileNotFoundError(f"{stem} not found in {directory} (set {DATA_ROOT_ENV})")


def load_dataset(name: str, split: str = "train", root=None) -> Dataset:
    """Load ``train`` or ``test`` split of a registered dataset from the data root."""
    if name not in REGISTRY:
        raise KeyError(f"unknown dataset {name!r}; known: {sorted(REGISTRY)}")
    directory = data_root(root) / name
    tr_img, tr_lab, te_img, te_lab = REGISTRY[name]
    if split == "train":
        return load_idx(_find(directory, tr_img), _find(directory, tr_lab), "train", name)
    if split == "test":
        return load_idx(_find(directory, te_img), _find(directory, te_lab), "test", name)
    raise ValueError(f"split must be 'train' or 'test', got {split!r}")


# ----------------------------------------------------------------- splits


def split_train_val(ds: Dataset, val_count: int = 10000, seed: int = 0) -> tuple[Dataset, Dataset]:
    """Seeded shuffle, then hold out the last ``val_count`` samples."""
    if val_count >= len(ds):
        raise ValueError(f"val_count {val_count} must be smaller than the dataset ({len(ds)})")
    if val_count == 0:
        return ds, ds.replace(images=ds.images[:0], labels=ds.labels[:0], split="val")
    order = np.random.default_rng(seed).permutation(len(ds))
    tr, va = order[:-val_count], order[-val_count:]
    return (
        ds.replace(images=ds.images[tr], labels=ds.labels[tr], split="train"),
        ds.replace(images=ds.images[va], labels=ds.labels[va], split="val"),
    )


def take(ds: Dataset, count: int | None, seed: int | None = None) -> Dataset:
    """First ``count`` samples, or a seeded random subset when ``seed`` is given."""
    if count is None or count >= len(ds):
        return ds
    idx = np.arange(count) if seed is None else np.sort(np.random.default_rng(seed).permutation(len(ds))[:count])
    return ds.replace(images=ds.images[idx], labels=ds.labels[idx])


def zscore_fit_apply(train: Dataset, others: Sequence[Dataset] = ()) -> tuple[Dataset, list[Dataset], tuple]:
    """Fit mean/std on ``train`` (per channel) and apply them to every split."""
    if len(train) == 0:
        raise ValueError("cannot fit normalization on an empty dataset")
    mean = train.images.mean(axis=(0, 1, 2))
    std = train.images.std(axis=(0, 1, 2))
    if np.any(std <= 0):
        raise ValueError("zero standard deviation; the training images are constant")
    stats = (mean, std)

    def norm(ds: Dataset) -> Dataset:
        return ds.replace(images=(ds.images - mean) / std, stats=stats)

    return norm(train), [norm(o) for o in others], stats


def denormalize(ds: Dataset) -> np.ndarray:
    if ds.stats is None:
        return ds.images
    mean, std = ds.stats
    return ds.images * std + mean


def batches(ds: Dataset, batch_size: int = 50, shuffle_seed: int | None = None) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Yield ``(images, labels)`` batches; the last batch may be short."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    n = len(ds)
    order = np.arange(n) if shuffle_seed is None else np.random.default_rng(shuffle_seed).permutation(n)
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        yield ds.images[idx], ds.labels[idx]
