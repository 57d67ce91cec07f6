"""Datasets: IDX reader/writer, the bundled MNIST subset, synthetic blobs, metrics output."""
from __future__ import annotations

import csv
import gzip
import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import FormatError, InputError, UsageError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass(frozen=True)
class Dataset:
    """Samples ``x`` ([N, C, H, W] or [N, D]) with integer labels ``y``."""

    x: np.ndarray
    y: np.ndarray
    num_classes: int

    def __post_init__(self):
        if len(self.x) < 1 or len(self.x) != len(self.y):
            raise InputError(f"need N >= 1 matching samples/labels, got {len(self.x)}/{len(self.y)}")
        if self.y.min() < 0 or self.y.max() >= self.num_classes:
            raise InputError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.y)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.intp)
        return Dataset(self.x[idx], self.y[idx], self.num_classes)

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.y, minlength=self.num_classes)


def _open(path):
    path = Path(path)
    return gzip.open(path, "rb") if path.suffix == ".gz" else open(path, "rb")


def _read_idx(path, expected_magic: int) -> np.ndarray:
    with _open(path) as fh:
        raw = fh.read()
    if len(raw) < 8:
        raise FormatError(f"{path}: truncated header")
    magic = struct.unpack(">I", raw[:4])[0]
    if magic != expected_magic:
        raise FormatError(f"{path}: bad magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise FormatError(f"{path}: truncated header")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    count = int(np.prod(dims))
    if len(raw) - header != count:
        raise FormatError(f"{path}: payload has {len(raw) - header} bytes, header promises {count}")
    return np.frombuffer(raw, dtype=np.uint8, offset=header).reshape(dims)


def load_idx(images_path, labels_path, num_classes: int = 10) -> Dataset:
    """Read an IDX image/label pair (optionally gzipped); pixels scaled to [0, 1]."""
    images = _read_idx(images_path, IDX_IMAGES_MAGIC)
    labels = _read_idx(labels_path, IDX_LABELS_MAGIC)
    if images.shape[0] != labels.shape[0]:
        raise FormatError(f"{images.shape[0]} images but {labels.shape[0]} labels")
    x = images.astype(np.float64)[:, None, :, :] / 255.0
    return Dataset(x, labels.astype(np.int64), num_classes)


def write_idx(images: np.ndarray, labels: np.ndarray, images_path, labels_path):
    """Write uint8 images [N, H, W] and labels [N] as an IDX pair."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, *images.shape))
        fh.write(images.tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">II", IDX_LABELS_MAGIC, labels.shape[0]))
        fh.write(labels.tobytes())


def load_mnist_subset() -> Dataset:
    """The 5000-image MNIST subset (500 per digit) shipped with ``mlxtend``."""
    try:
        import importlib.resources as resources

        path = resources.files("mlxtend") / "data" / "data" / "mnist_5k.csv.gz"
    except ModuleNotFoundError as exc:  # pragma: no cover - depends on environment
        raise UsageError("the MNIST subset needs the optional 'mlxtend' package") from exc
    with path.open("rb") as raw, gzip.open(raw, "rt") as fh:
        table = np.loadtxt(fh, delimiter=",")
    x = table[:, :-1].reshape(-1, 1, 28, 28) / 255.0
    return Dataset(x, table[:, -1].astype(np.int64), 10)


def gen_synthetic(classes: int, per_class: int, shape: Sequence[int], separation: float,
                  seed: int) -> Dataset:
    """Gaussian blobs with unit covariance whose means are ``separation`` apart from the origin."""
    if separation <= 0:
        raise InputError("separation must be positive")
    rng = np.random.default_rng(seed)
    dim = int(np.prod(shape))
    means = rng.normal(size=(classes, dim))
    means *= separation / np.linalg.norm(means, axis=1, keepdims=True)
    y = np.repeat(np.arange(classes), per_class)
    x = means[y] + rng.normal(size=(len(y), dim))
    order = rng.permutation(len(y))
    return Dataset(x[order].reshape((len(y), *shape)), y[order], classes)


METRIC_COLUMNS = (
    "round",
    "global_accuracy",
    "global_loss",
    "mean_client_accuracy",
    "client_accuracy",
    "weight_vectors",
    "seconds",
)


def _csv_cell(value):
    if isinstance(value, (list, tuple, dict)):
        return json.dumps(value)
    return repr(value) if isinstance(value, float) else value


def emit_metrics(reports: Sequence[dict], path, fmt: str = "json"):
    """Write one row (CSV) or object (JSON array) per round.

    CSV columns are :data:`METRIC_COLUMNS` in that order; list-valued
    fields are embedded as JSON text.
    """
    if not reports:
        raise UsageError("no reports to write")
    path = Path(path)
    if fmt == "json":
        path.write_text(json.dumps(list(reports), indent=1))
    elif fmt == "csv":
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(METRIC_COLUMNS)
            for r in reports:
                writer.writerow([_csv_cell(r.get(c)) for c in METRIC_COLUMNS])
    else:
        raise UsageError(f"unknown metrics format {fmt!r}")
    return path
