"""Dataset loading, preprocessing, splitting and mini-batch iteration."""

from __future__ import annotations

import csv
import gzip
import logging
import math
import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

__all__ = [
    "DATASETS",
    "Dataset",
    "SplitSpec",
    "FormatError",
    "DatasetMissingError",
    "read_idx",
    "write_idx",
    "load_idx",
    "load_wdbc",
    "oversample_minority",
    "holdout_split_spec",
    "fixed_test_split_spec",
    "split",
    "Standardizer",
    "standardize",
    "batch_indices",
    "batches",
    "resolve_data_dir",
    "prepare_dataset",
]

log = logging.getLogger(__name__)

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
DATA_DIR_ENV = "KWTA_DATA_DIR"

# name -> (input dimension, number of classes)
DATASETS = {
    "mnist": (784, 10),
    "fashion": (784, 10),
    "kmnist": (784, 10),
    "wdbc": (30, 2),
}
IDX_FILES = {
    "train_images": "train-images-idx3-ubyte",
    "train_labels": "train-labels-idx1-ubyte",
    "test_images": "t10k-images-idx3-ubyte",
    "test_labels": "t10k-labels-idx1-ubyte",
}
WDBC_FILE = "wdbc.data"


class FormatError(ValueError):
    """An input file does not follow its declared format."""


class DatasetMissingError(FileNotFoundError):
    """Dataset files are not present in the data directory."""


@dataclass
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    class_count: int
    name: str = ""

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2:
            raise ValueError(f"features must be 2-D, got shape {self.features.shape}")
        if self.labels.shape != (self.features.shape[0],):
            raise ValueError(f"{self.features.shape[0]} rows but labels have shape {self.labels.shape}")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise ValueError(f"labels must lie in [0, {self.class_count})")

    def __len__(self):
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.features[idx], self.labels[idx], self.class_count, self.name)

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.class_count)


@dataclass
class SplitSpec:
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray
    seed: int

    def __post_init__(self):
        parts = [np.asarray(p, dtype=np.int64) for p in (self.train, self.val, self.test)]
        self.train, self.val, self.test = parts
        joined = np.concatenate(parts)
        if np.unique(joined).size != joined.size:
            raise ValueError("train, val and test index sets overlap")


# --- IDX ----------------------------------------------------------------------


def _read_maybe_gzip(path) -> bytes:
    raw = Path(path).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        return gzip.decompress(raw)
    return raw


def read_idx(path) -> np.ndarray:
    """Parse an unsigned-byte IDX file (optionally gzip-compressed)."""
    raw = _read_maybe_gzip(path)
    if len(raw) < 4:
        raise FormatError(f"{path}: file too short for an IDX header ({len(raw)} bytes)")
    (magic,) = struct.unpack(">I", raw[:4])
    if raw[0] != 0 or raw[1] != 0 or raw[2] != 0x08:
        raise FormatError(f"{path}: bad IDX magic bytes {raw[:4].hex()}")
    ndim = raw[3]
    header_end = 4 + 4 * ndim
    if len(raw) < header_end:
        raise FormatError(f"{path}: truncated IDX dimension header")
    dims = struct.unpack(f">{ndim}I", raw[4:header_end])
    payload = raw[header_end:]
    expected = math.prod(dims)
    if len(payload) != expected:
        raise FormatError(f"{path}: payload has {len(payload)} bytes, dimensions {dims} need {expected}")
    return np.frombuffer(payload, dtype=np.uint8).reshape(dims)


def write_idx(path, array: np.ndarray, compress: bool = False) -> None:
    array = np.asarray(array)
    if array.dtype != np.uint8:
        raise ValueError(f"write_idx only writes uint8 arrays, got {array.dtype}")
    header = struct.pack(">I", 0x00000800 | array.ndim) + struct.pack(f">{array.ndim}I", *array.shape)
    blob = header + np.ascontiguousarray(array).tobytes()
    if compress:
        blob = gzip.compress(blob, mtime=0)
    Path(path).write_bytes(blob)


def load_idx(images_path, labels_path, name: str = "idx", class_count: int = 10) -> Dataset:
    """Load an image/label IDX pair as flattened pixels scaled to [0, 1]."""
    images = read_idx(images_path)
    labels = read_idx(labels_path)
    if (images.ndim + 0x800) != IDX_IMAGES_MAGIC:
        raise FormatError(f"{images_path}: expected a 3-D image file (magic 0x803), got {images.ndim} dimensions")
    if (labels.ndim + 0x800) != IDX_LABELS_MAGIC:
        raise FormatError(f"{labels_path}: expected a 1-D label file (magic 0x801), got {labels.ndim} dimensions")
    if images.shape[0] != labels.shape[0]:
        raise FormatError(f"{images.shape[0]} images but {labels.shape[0]} labels")
    features = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
    return Dataset(features, labels.astype(np.int64), class_count, name)


# --- WDBC -------------------------------------------------------------------------


def load_wdbc(csv_path) -> Dataset:
    """UCI WDBC layout: id, diagnosis (M/B), 30 features; no header. M -> 1, B -> 0."""
    features, labels = [], []
    with open(csv_path, newline="") as f:
        for lineno, row in enumerate(csv.reader(f), start=1):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 32:
                raise FormatError(f"{csv_path}:{lineno}: expected 32 columns, got {len(row)}")
            diagnosis = row[1].strip()
            if diagnosis not in ("M", "B"):
                raise FormatError(f"{csv_path}:{lineno}: diagnosis must be M or B, got {diagnosis!r}")
            try:
                values = [float(c) for c in row[2:]]
            except ValueError as exc:
                raise FormatError(f"{csv_path}:{lineno}: {exc}") from exc
            features.append(values)
            labels.append(1 if diagnosis == "M" else 0)
    if not features:
        raise FormatError(f"{csv_path}: no rows")
    return Dataset(np.array(features), np.array(labels), 2, "wdbc")


# --- preprocessing ----------------------------------------------------------------


def oversample_minority(ds: Dataset, rng: np.random.Generator) -> Dataset:
    """Append minority-class rows drawn with replacement until the classes balance."""
    counts = ds.class_counts()
    if ds.class_count != 2:
        raise ValueError(f"oversampling expects two classes, got {ds.class_count}")
    if np.count_nonzero(counts) < 2:
        raise ValueError("cannot balance a dataset that contains a single class")
    minority = int(np.argmin(counts))
    deficit = int(counts.max() - counts.min())
    if deficit == 0:
        return ds
    pool = np.flatnonzero(ds.labels == minority)
    extra = rng.choice(pool, size=deficit, replace=True)
    idx = np.concatenate([np.arange(len(ds)), extra])
    return ds.subset(idx)


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def holdout_split_spec(n: int, seed: int, test_fraction: float = 0.3, val_fraction: float = 0.1) -> SplitSpec:
    """Shuffle ``n`` rows, hold out a test share, then a validation share of the rest."""
    rng = np.random.Generator(np.random.PCG64(seed))
    perm = rng.permutation(n)
    n_test = _round_half_up(test_fraction * n)
    test, pool = perm[:n_test], perm[n_test:]
    n_val = _round_half_up(val_fraction * pool.size)
    return SplitSpec(train=pool[n_val:], val=pool[:n_val], test=test, seed=seed)


def fixed_test_split_spec(
    n_pool: int, n_test: int, seed: int, val_fraction: float = 0.1, train_limit: int | None = None
) -> SplitSpec:
    """Rows ``[0, n_pool)`` form the training pool, the next ``n_test`` rows the test set.

    ``train_limit`` first subsamples the pool (for reduced runs).
    """
    rng = np.random.Generator(np.random.PCG64(seed))
    pool = rng.permutation(n_pool)
    if train_limit is not None:
        pool = pool[:train_limit]
    n_val = _round_half_up(val_fraction * pool.size)
    return SplitSpec(
        train=pool[n_val:], val=pool[:n_val], test=np.arange(n_pool, n_pool + n_test), seed=seed
    )


def split(ds: Dataset, spec: SplitSpec) -> tuple[Dataset, Dataset, Dataset]:
    return ds.subset(spec.train), ds.subset(spec.val), ds.subset(spec.test)


class Standardizer(TransformerMixin, BaseEstimator):
    """Z-score columns with statistics from the data passed to ``fit``.

    Columns with zero spread keep a scale of 1 so they pass through centred.
    """

    def fit(self, X, y=None):
        X = check_array(X, dtype=np.float64)
        self.mean_ = X.mean(axis=0)
        scale = X.std(axis=0)
        scale[scale == 0.0] = 1.0
        self.scale_ = scale
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self)
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, Standardizer was fitted with {self.n_features_in_}")
        return (X - self.mean_) / self.scale_


def standardize(train: Dataset, *others: Dataset) -> list[Dataset]:
    """Fit a :class:`Standardizer` on ``train`` and apply it to every set given."""
    scaler = Standardizer().fit(train.features)
    return [Dataset(scaler.transform(d.features), d.labels, d.class_count, d.name) for d in (train, *others)]


# --- batching ---------------------------------------------------------------------


def batch_indices(n: int, batch_size: int, rng: np.random.Generator) -> Iterator[np.ndarray]:
    """One shuffled epoch of row indices; the last batch may be short."""
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    perm = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield perm[start : start + batch_size]


def batches(ds: Dataset, batch_size: int, rng: np.random.Generator) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    for idx in batch_indices(len(ds), batch_size, rng):
        yield ds.features[idx], ds.labels[idx]


# --- on-disk layout ---------------------------------------------------------------


def resolve_data_dir(flag=None) -> Path:
    """``--data-dir`` flag, then ``$KWTA_DATA_DIR``, then ``./data``."""
    if flag:
        return Path(flag)
    env = os.environ.get(DATA_DIR_ENV)
    if env:
        return Path(env)
    return Path("data")


def idx_path(data_dir, dataset: str, key: str) -> Path:
    base = Path(data_dir) / dataset / IDX_FILES[key]
    for candidate in (base, base.with_name(base.name + ".gz")):
        if candidate.exists():
            return candidate
    raise DatasetMissingError(
        f"{base}[.gz] not found; run `kwta-ensemble fetch {dataset}` or place the file there"
    )


def wdbc_path(data_dir) -> Path:
    path = Path(data_dir) / "wdbc" / WDBC_FILE
    if not path.exists():
        raise DatasetMissingError(f"{path} not found; run `kwta-ensemble fetch wdbc`")
    return path


def prepare_dataset(
    name: str,
    data_dir,
    seed: int,
    split_first: bool = False,
    train_limit: int | None = None,
    val_fraction: float = 0.1,
    test_fraction: float = 0.3,
) -> tuple[Dataset, Dataset, Dataset]:
    """Load ``name`` from ``data_dir`` and return (train, val, test).

    WDBC is oversampled to balance (before splitting unless ``split_first``)
    and standardised with training statistics. The image datasets keep their
    official test files and take validation rows out of the training file.
    """
    if name not in DATASETS:
        raise ValueError(f"unknown dataset {name!r}; choose from {sorted(DATASETS)}")
    data_seq = np.random.SeedSequence([seed, 0xDA7A])
    oversample_rng = np.random.Generator(np.random.PCG64(data_seq))
    split_seed = int(data_seq.generate_state(1)[0])

    if name == "wdbc":
        full = load_wdbc(wdbc_path(data_dir))
        if split_first:
            spec = holdout_split_spec(len(full), split_seed, test_fraction, val_fraction)
            train, val, test = split(full, spec)
            train = oversample_minority(train, oversample_rng)
        else:
            balanced = oversample_minority(full, oversample_rng)
            spec = holdout_split_spec(len(balanced), split_seed, test_fraction, val_fraction)
            train, val, test = split(balanced, spec)
        if train_limit is not None:
            train = train.subset(np.arange(min(train_limit, len(train))))
        return tuple(standardize(train, val, test))

    train_file = load_idx(idx_path(data_dir, name, "train_images"), idx_path(data_dir, name, "train_labels"), name)
    test_file = load_idx(idx_path(data_dir, name, "test_images"), idx_path(data_dir, name, "test_labels"), name)
    spec = fixed_test_split_spec(len(train_file), len(test_file), split_seed, val_fraction, train_limit)
    return train_file.subset(spec.train), train_file.subset(spec.val), test_file
