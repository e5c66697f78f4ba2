"""Datasets: synthetic 2-d rings and 1-d tilted Gaussians, IDX image files, batching."""

from __future__ import annotations

import csv
import gzip
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

from .numerics import Rng

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class IdxFormatError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Dataset:
    items: np.ndarray
    labels: np.ndarray | None = None
    name: str = ""
    normalization: str = "raw"
    image_shape: tuple[int, int] | None = None

    def __post_init__(self):
        items = np.asarray(self.items, dtype=np.float64)
        if items.ndim != 2 or items.shape[0] < 1:
            raise ValueError(f"dataset items must be a nonempty 2-d array, got {items.shape}")
        if self.normalization not in ("raw", "pm1"):
            raise ValueError(f"unknown normalization tag {self.normalization!r}")
        if self.normalization == "pm1" and (items.min() < -1.0 or items.max() > 1.0):
            raise ValueError("pm1 dataset has entries outside [-1, 1]")
        if self.labels is not None and len(self.labels) != len(items):
            raise ValueError("labels and items differ in length")
        object.__setattr__(self, "items", items)

    def __len__(self) -> int:
        return self.items.shape[0]

    @property
    def dim(self) -> int:
        return self.items.shape[1]

    def subset(self, index, name: str | None = None) -> "Dataset":
        index = np.asarray(index)
        return Dataset(
            self.items[index],
            None if self.labels is None else np.asarray(self.labels)[index],
            self.name if name is None else name,
            self.normalization,
            self.image_shape,
        )

    def to_csv(self, path) -> None:
        """Export as ``x0, x1, ..., label`` rows."""
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow([f"x{j}" for j in range(self.dim)] + ["label"])
            for i, row in enumerate(self.items):
                label = "" if self.labels is None else int(self.labels[i])
                writer.writerow([repr(float(v)) for v in row] + [label])


# --- synthetic ------------------------------------------------------------


def synth_ring(n: int, modes: int, radius: float, noise_sd: float, rng: Rng) -> Dataset:
    """Equal-weight Gaussian blobs centred at angles ``2 pi j / modes`` on a circle."""
    if modes < 1:
        raise ValueError(f"modes must be >= 1, got {modes}")
    labels = rng.integers(modes, n)
    centers = ring_centers(modes, radius)
    items = centers[labels] + noise_sd * rng.standard_normal((n, 2))
    return Dataset(items, labels, name=f"ring{modes}")


def ring_centers(modes: int, radius: float) -> np.ndarray:
    angles = 2.0 * np.pi * np.arange(modes) / modes
    return radius * np.column_stack([np.cos(angles), np.sin(angles)])


def synth_tilted(n: int, mean: float, sigma: float, rng: Rng) -> Dataset:
    """``x = z + sigma * eps`` with ``z ~ N(mean, 1)`` in one dimension."""
    z = mean + rng.standard_normal((n, 1))
    return Dataset(z + sigma * rng.standard_normal((n, 1)), name="tilted")


# --- IDX ------------------------------------------------------------------


def _read_bytes(path) -> bytes:
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as fh:
        return fh.read()


def _parse_idx(raw: bytes, magic: int, what: str) -> tuple[tuple[int, ...], np.ndarray]:
    if len(raw) < 8:
        raise IdxFormatError(f"{what}: file too short for an IDX header")
    (found,) = struct.unpack(">I", raw[:4])
    if found != magic:
        raise IdxFormatError(f"{what}: magic 0x{found:08x}, expected 0x{magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise IdxFormatError(f"{what}: truncated header")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    expected = int(np.prod(dims))
    payload = np.frombuffer(raw, dtype=np.uint8, offset=header)
    if payload.size < expected:
        raise IdxFormatError(f"{what}: header declares {expected} bytes of data, found {payload.size}")
    if payload.size > expected:
        raise IdxFormatError(f"{what}: {payload.size - expected} trailing bytes after data")
    return dims, payload.reshape(dims)


def normalize_pixels(pixels: np.ndarray) -> np.ndarray:
    return pixels.astype(np.float64) / 127.5 - 1.0


def denormalize_pixels(x: np.ndarray) -> np.ndarray:
    """Inverse of :func:`normalize_pixels`, rounded and clipped to uint8."""
    return np.clip(np.rint((np.asarray(x) + 1.0) * 127.5), 0, 255).astype(np.uint8)


def load_idx(images_path, labels_path=None) -> Dataset:
    """Read an IDX image file (and optional label file); pixels map to [-1, 1]."""
    dims, pixels = _parse_idx(_read_bytes(images_path), IDX_IMAGES_MAGIC, str(images_path))
    n, rows, cols = dims
    labels = None
    if labels_path is not None:
        (n_labels,), labels = _parse_idx(_read_bytes(labels_path), IDX_LABELS_MAGIC, str(labels_path))
        if n_labels != n:
            raise IdxFormatError(f"{n} images but {n_labels} labels")
        labels = labels.astype(np.int64)
    return Dataset(
        normalize_pixels(pixels.reshape(n, rows * cols)),
        labels,
        name=Path(images_path).name,
        normalization="pm1",
        image_shape=(rows, cols),
    )


def write_idx_images(path, pixels: np.ndarray) -> None:
    pixels = np.asarray(pixels, dtype=np.uint8)
    n, rows, cols = pixels.shape
    with open(path, "wb") as fh:
        fh.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, rows, cols))
        fh.write(pixels.tobytes())


def write_idx_labels(path, labels: np.ndarray) -> None:
    labels = np.asarray(labels, dtype=np.uint8)
    with open(path, "wb") as fh:
        fh.write(struct.pack(">II", IDX_LABELS_MAGIC, labels.size))
        fh.write(labels.tobytes())


# --- batching and splits --------------------------------------------------


def batch_indices(n: int, m: int, rng: Rng) -> np.ndarray:
    if not 1 <= m <= n:
        raise ValueError(f"batch size must satisfy 1 <= m <= N, got m={m}, N={n}")
    return rng.integers(n, m)


def batch_iter(dataset: Dataset, m: int, rng: Rng) -> Iterator[np.ndarray]:
    """Endless stream of with-replacement minibatches."""
    while True:
        yield dataset.items[batch_indices(len(dataset), m, rng)]


def anomaly_split(
    dataset: Dataset, anomaly_label: int, test_fraction: float, rng: Rng
) -> tuple[Dataset, Dataset]:
    """Train on normal items only; test on held-out normals plus anomalies.

    A ``test_fraction`` share of each class goes to the test split. Test
    labels are 1 for the anomaly class and 0 otherwise.
    """
    if dataset.labels is None:
        raise ValueError("anomaly split needs a labelled dataset")
    labels = np.asarray(dataset.labels)
    order = np.argsort(rng.uniform((len(dataset),)), kind="stable")
    train_idx, test_idx = [], []
    for cls in np.unique(labels):
        members = order[labels[order] == cls]
        n_test = int(round(test_fraction * members.size))
        test_idx.extend(members[:n_test])
        if cls != anomaly_label:
            train_idx.extend(members[n_test:])
    train_idx, test_idx = np.sort(train_idx), np.sort(test_idx)
    train = dataset.subset(train_idx, name=f"{dataset.name}-normal")
    test = dataset.subset(test_idx, name=f"{dataset.name}-test")
    test = Dataset(
        test.items,
        (labels[test_idx] == anomaly_label).astype(np.int64),
        test.name,
        test.normalization,
        test.image_shape,
    )
    return train, test


def datasets_for(cfg) -> tuple[Dataset, Dataset | None]:
    """Training set and (when a holdout digit is set) anomaly test set for a config.

    Synthetic sets are drawn from the ``(seed, "data")`` stream. IDX data with
    ``holdout_digit >= 0`` goes through :func:`anomaly_split`; ``n_train > 0``
    keeps the first ``n_train`` training items.
    """
    test = None
    if cfg.dataset == "ring":
        train = synth_ring(cfg.n_data, cfg.ring_modes, cfg.ring_radius, cfg.ring_noise, Rng(cfg.seed, "data"))
    elif cfg.dataset == "tilted":
        train = synth_tilted(cfg.n_data, cfg.tilt_mean, cfg.sigma, Rng(cfg.seed, "data"))
    else:
        if not cfg.idx_images:
            raise ValueError("dataset = idx needs idx_images")
        train = load_idx(cfg.idx_images, cfg.idx_labels or None)
        if cfg.holdout_digit >= 0:
            train, test = anomaly_split(train, cfg.holdout_digit, cfg.test_fraction, Rng(cfg.seed, "split"))
    if cfg.n_train > 0:
        train = train.subset(np.arange(min(cfg.n_train, len(train))))
    return train, test
