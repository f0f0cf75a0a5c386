"""Datasets: IDX image files, CSV time series and seeded synthetic fixtures.

Nothing here touches the network; IDX and CSV files must already be on
disk.  A :class:`Dataset` maps split names to ``(inputs, targets)`` arrays.
"""

from __future__ import annotations

import csv
import gzip
import math
import os
import struct
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

from .errors import DataError, FormatError

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801

# IDX element type codes
_IDX_TYPES = {
    0x08: np.dtype(np.uint8),
    0x09: np.dtype(np.int8),
    0x0B: np.dtype(">i2"),
    0x0C: np.dtype(">i4"),
    0x0D: np.dtype(">f4"),
    0x0E: np.dtype(">f8"),
}
_IDX_CODES = {np.dtype(v).newbyteorder("="): k for k, v in _IDX_TYPES.items()}

MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


@dataclass
class Dataset:
    """Named splits of ``(inputs, targets)`` plus normalisation metadata."""

    splits: dict[str, tuple[np.ndarray, np.ndarray]]
    task: str = "classification"
    meta: dict = field(default_factory=dict)
    normalized: bool = False

    def __post_init__(self):
        for name, (x, y) in self.splits.items():
            if len(x) != len(y):
                raise DataError(f"split {name!r}: {len(x)} inputs but {len(y)} targets")

    def split(self, name: str) -> tuple[np.ndarray, np.ndarray]:
        try:
            return self.splits[name]
        except KeyError:
            raise DataError(f"dataset has no split {name!r} (available: {sorted(self.splits)})") from None

    def __contains__(self, name: str) -> bool:
        return name in self.splits

    @property
    def n_classes(self) -> int:
        return int(max(int(y.max()) for _, y in self.splits.values()) + 1)

    def subset(self, split: str, n: int, seed: int = 0) -> "Dataset":
        """Keep a seeded random subset of ``n`` rows of one split."""
        x, y = self.split(split)
        if n >= len(x):
            return self
        idx = np.sort(np.random.default_rng(seed).permutation(len(x))[:n])
        splits = dict(self.splits)
        splits[split] = (x[idx], y[idx])
        return Dataset(splits, self.task, dict(self.meta), self.normalized)

    def filter_classes(self, classes: Sequence[int], relabel: bool = True) -> "Dataset":
        """Keep only ``classes``; with ``relabel`` map them to ``0..k-1`` in order."""
        classes = list(classes)
        lut = {c: i for i, c in enumerate(classes)}
        splits = {}
        for name, (x, y) in self.splits.items():
            keep = np.isin(y, classes)
            yk = y[keep]
            if relabel:
                yk = np.array([lut[int(v)] for v in yk], dtype=y.dtype)
            splits[name] = (x[keep], yk)
        return Dataset(splits, self.task, dict(self.meta, classes=classes), self.normalized)


# -- IDX ----------------------------------------------------------------------

def _open(path):
    return gzip.open(path, "rb") if str(path).endswith(".gz") else open(path, "rb")


def read_idx(path, expect_magic: int | None = None) -> np.ndarray:
    """Parse one IDX file into a native-endian array.

    Raises :class:`FormatError` for an unexpected magic number, an unknown
    element type or a payload shorter than the header promises.
    """
    if not os.path.exists(path):
        raise DataError(f"file not found: {path}")
    with _open(path) as fh:
        raw = fh.read()
    if len(raw) < 4:
        raise FormatError(f"{path}: truncated header ({len(raw)} bytes)")
    (magic,) = struct.unpack(">I", raw[:4])
    if expect_magic is not None and magic != expect_magic:
        raise FormatError(f"{path}: bad magic 0x{magic:08x} ({magic}), expected 0x{expect_magic:08x} ({expect_magic})")
    if magic >> 16 != 0:
        raise FormatError(f"{path}: bad magic 0x{magic:08x} ({magic})")
    code, rank = (magic >> 8) & 0xFF, magic & 0xFF
    if code not in _IDX_TYPES:
        raise FormatError(f"{path}: unknown IDX element type 0x{code:02x}")
    head = 4 + 4 * rank
    if len(raw) < head:
        raise FormatError(f"{path}: truncated header ({len(raw)} bytes, need {head})")
    dims = struct.unpack(f">{rank}I", raw[4:head])
    dtype = _IDX_TYPES[code]
    need = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
    if len(raw) - head < need:
        raise FormatError(f"{path}: truncated payload ({len(raw) - head} of {need} bytes)")
    arr = np.frombuffer(raw, dtype=dtype, count=need // dtype.itemsize, offset=head).reshape(dims)
    return arr.astype(dtype.newbyteorder("="))


def idx_header(path) -> tuple[int, tuple[int, ...]]:
    """``(magic, dims)`` without reading the payload."""
    with _open(path) as fh:
        raw = fh.read(4)
        (magic,) = struct.unpack(">I", raw)
        rank = magic & 0xFF
        dims = struct.unpack(f">{rank}I", fh.read(4 * rank))
    return magic, dims


def write_idx(path, arr: np.ndarray) -> None:
    arr = np.asarray(arr)
    code = _IDX_CODES.get(arr.dtype.newbyteorder("="))
    if code is None:
        raise FormatError(f"dtype {arr.dtype} has no IDX type code")
    with open(path, "wb") as fh:
        fh.write(struct.pack(">I", (code << 8) | arr.ndim))
        fh.write(struct.pack(f">{arr.ndim}I", *arr.shape))
        fh.write(arr.astype(_IDX_TYPES[code]).tobytes())


def load_idx(images_path, labels_path, split: str = "train", dtype=np.float32, n_classes: int = 10) -> Dataset:
    """Images (rank-3 u8) and labels (rank-1 u8) as a one-split dataset.

    Pixels are scaled to ``[0, 1]`` and returned as ``[N, 1, H, W]``.
    Every label must lie in ``[0, n_classes)``.
    """
    images = read_idx(images_path, IMAGE_MAGIC)
    labels = read_idx(labels_path, LABEL_MAGIC)
    if images.shape[0] != labels.shape[0]:
        raise DataError(f"{images.shape[0]} images but {labels.shape[0]} labels")
    bad = np.flatnonzero(labels >= n_classes)
    if bad.size:
        raise DataError(f"{labels_path}: label {int(labels[bad[0]])} at index {int(bad[0])} outside [0, {n_classes})")
    x = (images.astype(dtype) / 255.0).reshape(images.shape[0], 1, *images.shape[1:])
    y = labels.astype(np.int64)
    return Dataset({split: (x, y)}, "classification", {"scale": "divide by 255"}, normalized=True)


def load_idx_dir(root, splits: Sequence[str] = ("train", "test")) -> Dataset:
    """Load the standard MNIST-layout file pair per split from a directory.

    Gzipped files (``.gz`` suffix) are accepted.
    """
    out = {}
    for split in splits:
        paths = []
        for name in MNIST_FILES[split]:
            p = os.path.join(root, name)
            if not os.path.exists(p) and os.path.exists(p + ".gz"):
                p += ".gz"
            paths.append(p)
        out.update(load_idx(*paths, split=split).splits)
    return Dataset(out, "classification", {"scale": "divide by 255", "root": str(root)}, normalized=True)


# -- time series --------------------------------------------------------------

def series_windows(values: np.ndarray, target: np.ndarray, window: int, horizon: int = 1,
                   train_frac: float = 0.8, dtype=np.float32) -> Dataset:
    """Sliding-window regression samples from a multivariate series.

    Sample ``i`` takes rows ``i .. i+window-1`` as input; the window ends at
    ``t = i + window`` (exclusive) and the target is ``target[t + horizon]``.
    A series of length ``n`` yields ``n - window - horizon`` samples.  The
    first ``train_frac`` of them (chronologically) form the train split and
    min-max statistics are fitted on the rows that split touches.
    """
    values = np.asarray(values, dtype=np.float64)
    if values.ndim == 1:
        values = values[:, None]
    target = np.asarray(target, dtype=np.float64).ravel()
    if window < 1 or horizon < 0:
        raise DataError(f"need window >= 1 and horizon >= 0, got {window}, {horizon}")
    n = len(values)
    count = n - window - horizon
    if count < 2:
        raise DataError(f"series of length {n} too short for window {window}, horizon {horizon}")
    n_train = max(1, min(count - 1, int(math.floor(train_frac * count))))
    fit_rows = n_train - 1 + window + horizon + 1
    lo_x, hi_x = values[:fit_rows].min(axis=0), values[:fit_rows].max(axis=0)
    lo_y, hi_y = target[:fit_rows].min(), target[:fit_rows].max()
    span_x = np.where(hi_x > lo_x, hi_x - lo_x, 1.0)
    span_y = hi_y - lo_y if hi_y > lo_y else 1.0
    xs = (values - lo_x) / span_x
    ys = (target - lo_y) / span_y
    idx = np.arange(count)[:, None] + np.arange(window)[None, :]
    x = xs[idx].astype(dtype)
    y = ys[np.arange(count) + window + horizon].astype(dtype)[:, None]
    meta = {"x_min": lo_x.tolist(), "x_max": hi_x.tolist(), "y_min": float(lo_y), "y_max": float(hi_y),
            "window": window, "horizon": horizon, "n_samples": int(count)}
    return Dataset({"train": (x[:n_train], y[:n_train]), "test": (x[n_train:], y[n_train:])},
                   "regression", meta, normalized=True)


def load_csv_series(path, feature_columns: Sequence[str] | None, target_column: str, window: int,
                    horizon: int = 1, train_frac: float = 0.8) -> Dataset:
    """Windowed regression dataset from a CSV file with a header row.

    ``feature_columns=None`` uses the target column alone.
    """
    if not os.path.exists(path):
        raise DataError(f"file not found: {path}")
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        feats = list(feature_columns) if feature_columns else [target_column]
        missing = [c for c in feats + [target_column] if c not in header]
        if missing:
            raise DataError(f"{path}: columns {missing} not in header {header}")
        cols = [header.index(c) for c in feats]
        tcol = header.index(target_column)
        rows, tgt = [], []
        for line_no, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            try:
                rows.append([float(row[c]) for c in cols])
                tgt.append(float(row[tcol]))
            except (ValueError, IndexError):
                bad = next(c for c in cols + [tcol] if c >= len(row) or not _is_float(row[c]))
                cell = row[bad] if bad < len(row) else "<missing>"
                raise DataError(f"{path}: non-numeric cell {cell!r} at row {line_no}, column {header[bad]!r}") from None
            if not all(math.isfinite(v) for v in rows[-1] + tgt[-1:]):
                bad = next(c for c in cols + [tcol] if not math.isfinite(float(row[c])))
                raise DataError(f"{path}: non-finite cell {row[bad]!r} at row {line_no}, column {header[bad]!r}")
    ds = series_windows(np.array(rows), np.array(tgt), window, horizon, train_frac)
    ds.meta.update(path=str(path), features=feats, target=target_column)
    return ds


def _is_float(s: str) -> bool:
    try:
        float(s)
        return True
    except ValueError:
        return False


# -- synthetic ----------------------------------------------------------------

def gaussian_blobs(n: int = 600, classes: int = 2, dim: int = 2, separation: float = 10.0,
                   std: float = 1.0, seed: int = 0) -> Dataset:
    """Isotropic clusters centred at ``separation * std * e_k`` (one axis per class).

    Needs ``dim >= classes``.  Train/test split 80/20.
    """
    if dim < classes:
        raise DataError(f"gaussian_blobs needs dim >= classes ({dim} < {classes})")
    rng = np.random.default_rng(seed)
    y = np.arange(n) % classes
    rng.shuffle(y)
    centers = np.eye(classes, dim) * separation * std
    x = centers[y] + rng.standard_normal((n, dim)) * std
    return _split_xy(x.astype(np.float32), y.astype(np.int64), "classification",
                     {"kind": "gaussian_blobs", "separation": separation, "std": std})


def sine_mix(length: int = 1200, components: int = 3, noise: float = 0.05, window: int = 20,
             horizon: int = 0, seed: int = 0) -> Dataset:
    """Sum of seeded sinusoids plus Gaussian noise, windowed for regression.

    Periods are drawn uniformly from [20, 120] steps; amplitudes from [0.5, 1].
    """
    rng = np.random.default_rng(seed)
    t = np.arange(length, dtype=np.float64)
    periods = rng.uniform(20, 120, components)
    amps = rng.uniform(0.5, 1.0, components)
    phases = rng.uniform(0, 2 * np.pi, components)
    s = (amps[:, None] * np.sin(2 * np.pi * t[None, :] / periods[:, None] + phases[:, None])).sum(axis=0)
    s = s + noise * rng.standard_normal(length)
    ds = series_windows(s, s, window, horizon)
    ds.meta.update(kind="sine_mix", series=s, periods=periods.tolist())
    return ds


def xor_grid(n: int = 2000, cells: int = 8, seed: int = 0) -> Dataset:
    """Checkerboard labels on the unit square: ``(floor(c x) + floor(c y)) mod 2``."""
    rng = np.random.default_rng(seed)
    x = rng.uniform(0.0, 1.0, (n, 2))
    y = (np.floor(x[:, 0] * cells) + np.floor(x[:, 1] * cells)).astype(np.int64) % 2
    return _split_xy(x.astype(np.float32), y, "classification", {"kind": "xor_grid", "cells": cells})


SYNTH = {"gaussian_blobs": gaussian_blobs, "sine_mix": sine_mix, "xor_grid": xor_grid}


def synth(kind: str, params: dict | None = None, seed: int = 0) -> Dataset:
    try:
        fn = SYNTH[kind]
    except KeyError:
        raise DataError(f"unknown synthetic dataset {kind!r}; choose from {sorted(SYNTH)}") from None
    return fn(seed=seed, **(params or {}))


def _split_xy(x, y, task, meta, train_frac=0.8) -> Dataset:
    k = int(len(x) * train_frac)
    return Dataset({"train": (x[:k], y[:k]), "test": (x[k:], y[k:])}, task, meta, normalized=True)


# -- batching -----------------------------------------------------------------

def batches(dataset: Dataset, split: str, batch_size: int, seed: int | None = None,
            epoch: int = 0) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Minibatches of one split; the order depends only on ``(seed, epoch)``.

    ``seed=None`` keeps the stored order.  The final short batch is kept.
    """
    x, y = dataset.split(split)
    n = len(x)
    order = np.arange(n) if seed is None else np.random.default_rng([seed, epoch]).permutation(n)
    for lo in range(0, n, batch_size):
        idx = order[lo:lo + batch_size]
        yield x[idx], y[idx]
