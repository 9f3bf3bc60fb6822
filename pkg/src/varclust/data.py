"""Dataset ingestion and synthesis.

IDX-format binary files (optionally gzipped), generic labeled/unlabeled image
folders, synthetic Gaussian blob images for oracle tests, and a deterministic
batch iterator. Loaded datasets are immutable float64 arrays in [0, 1].
"""
from __future__ import annotations

import gzip
import logging
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ConsistencyError, FormatError, InvalidArgumentError

log = logging.getLogger(__name__)

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")


@dataclass(frozen=True)
class Dataset:
    """N x (C*H*W) image rows in [0, 1] with optional evaluation labels."""

    images: np.ndarray
    shape: tuple[int, int, int]
    name: str
    labels: np.ndarray | None = None

    def __post_init__(self):
        images = np.asarray(self.images, dtype=np.float64)
        object.__setattr__(self, "images", images)
        c, h, w = self.shape
        if images.ndim != 2 or images.shape[1] != c * h * w:
            raise InvalidArgumentError(
                f"images must be N x {c * h * w} for shape {self.shape}, got {images.shape}")
        if images.size and (images.min() < 0.0 or images.max() > 1.0):
            raise InvalidArgumentError("image values must lie in [0, 1]")
        if self.labels is not None:
            labels = np.asarray(self.labels, dtype=np.int64)
            object.__setattr__(self, "labels", labels)
            if labels.shape != (images.shape[0],):
                raise InvalidArgumentError("labels length must match image count")
            if labels.size and labels.min() < 0:
                raise InvalidArgumentError("labels must be nonnegative")

    @property
    def n(self) -> int:
        return self.images.shape[0]

    @property
    def dim(self) -> int:
        return self.images.shape[1]


@dataclass(frozen=True)
class ImageBatch:
    """A batch of images as (n, C, H, W) values plus their dataset indices."""

    images: np.ndarray
    indices: np.ndarray

    @property
    def n(self) -> int:
        return self.images.shape[0]


def _open_maybe_gzip(path: Path):
    if path.suffix == ".gz":
        return gzip.open(path, "rb")
    return open(path, "rb")


def _read_idx(path: Path, expected_magic: int, ndim: int) -> np.ndarray:
    with _open_maybe_gzip(path) as fh:
        header = fh.read(4 * (1 + ndim))
        if len(header) < 4 * (1 + ndim):
            raise FormatError(f"{path}: truncated IDX header")
        fields = struct.unpack(f">{1 + ndim}I", header)
        if fields[0] != expected_magic:
            raise FormatError(
                f"{path}: bad IDX magic 0x{fields[0]:08x}, expected 0x{expected_magic:08x}")
        dims = fields[1:]
        count = int(np.prod(dims))
        payload = fh.read(count + 1)
        if len(payload) != count:
            raise FormatError(
                f"{path}: payload has {len(payload)} bytes, expected {count}")
        return np.frombuffer(payload, dtype=np.uint8).reshape(dims)


def load_idx(images_path, labels_path=None) -> Dataset:
    """Load an IDX image file (and optional label file) into a dataset.

    Big-endian headers: magic 0x00000803 for images (count, rows, cols) and
    0x00000801 for labels. ``.gz`` suffixes are decompressed transparently.
    """
    images_path = Path(images_path)
    raw = _read_idx(images_path, IDX_IMAGES_MAGIC, ndim=3)
    n, rows, cols = raw.shape
    images = raw.reshape(n, rows * cols).astype(np.float64) / 255.0
    labels = None
    if labels_path is not None:
        labels_path = Path(labels_path)
        raw_labels = _read_idx(labels_path, IDX_LABELS_MAGIC, ndim=1)
        if raw_labels.shape[0] != n:
            raise ConsistencyError(
                f"{labels_path}: {raw_labels.shape[0]} labels for {n} images")
        labels = raw_labels.astype(np.int64)
    return Dataset(images=images, shape=(1, rows, cols),
                   name=images_path.name.split(".")[0], labels=labels)


def load_image_folder(root, target_shape: tuple[int, int, int],
                      grayscale: bool = True) -> Dataset:
    """Load a folder of images, resized bilinearly to ``target_shape``.

    A one-subdirectory-per-class layout yields labels (classes sorted by
    name); a flat folder yields an unlabeled dataset. Files that fail to
    decode are skipped with a logged warning.
    """
    root = Path(root)
    if not root.is_dir():
        raise InvalidArgumentError(f"{root} is not a directory")
    class_dirs = sorted(d for d in root.iterdir() if d.is_dir())
    entries: list[tuple[Path, int | None]] = []
    if class_dirs:
        for label, class_dir in enumerate(class_dirs):
            for path in sorted(class_dir.rglob("*")):
                if path.suffix.lower() in IMAGE_SUFFIXES:
                    entries.append((path, label))
    else:
        entries = [(p, None) for p in sorted(root.iterdir())
                   if p.suffix.lower() in IMAGE_SUFFIXES]
    c, h, w = target_shape
    rows, labels, failures = [], [], []
    for path, label in entries:
        try:
            with Image.open(path) as img:
                img = img.convert("L" if grayscale else "RGB")
                img = img.resize((w, h), Image.BILINEAR)
                arr = np.asarray(img, dtype=np.float64) / 255.0
        except Exception as exc:  # undecodable file: collect and continue
            failures.append(path)
            log.warning("skipping %s: %s", path, exc)
            continue
        if arr.ndim == 2:
            arr = arr[None, :, :]
        else:
            arr = arr.transpose(2, 0, 1)
        if arr.shape[0] != c:
            failures.append(path)
            log.warning("skipping %s: has %d channels, expected %d", path, arr.shape[0], c)
            continue
        rows.append(arr.reshape(-1))
        labels.append(label)
    if failures:
        log.warning("image folder %s: skipped %d undecodable file(s)", root, len(failures))
    if not rows:
        raise InvalidArgumentError(f"no loadable images under {root}")
    images = np.stack(rows)
    has_labels = bool(class_dirs)
    return Dataset(images=images, shape=(c, h, w), name=root.name,
                   labels=np.asarray(labels, dtype=np.int64) if has_labels else None)


def synth_blobs(k: int, per_cluster_n: int, dim: int, separation: float,
                noise_sigma: float, seed: int = 0) -> Dataset:
    """K isotropic Gaussian clusters squashed into [0, 1] by one affine map.

    Centers are drawn randomly and rescaled so the closest pair sits exactly
    ``separation`` apart; labels record the generating component.
    """
    if k < 2:
        raise InvalidArgumentError("need K >= 2")
    if separation <= 0 or noise_sigma <= 0:
        raise InvalidArgumentError("separation and noise_sigma must be positive")
    rng = np.random.default_rng(seed)
    while True:
        centers = rng.normal(size=(k, dim))
        d2 = ((centers[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        np.fill_diagonal(d2, np.inf)
        min_dist = float(np.sqrt(d2.min()))
        if min_dist > 0:
            break
    centers *= separation / min_dist
    labels = np.repeat(np.arange(k), per_cluster_n)
    samples = centers[labels] + noise_sigma * rng.normal(size=(labels.size, dim))
    if samples.size:
        lo, hi = samples.min(), samples.max()
        samples = (samples - lo) / (hi - lo) if hi > lo else np.zeros_like(samples)
    side = int(round(dim ** 0.5))
    shape = (1, side, side) if side * side == dim else (1, 1, dim)
    return Dataset(images=samples, shape=shape, name=f"blobs_k{k}_d{dim}",
                   labels=labels)


def batch_iterator(dataset: Dataset, batch_size: int, seed: int = 0,
                   shuffle: bool = True):
    """One epoch of batches; a deterministic seeded shuffle, final partial batch kept."""
    if batch_size < 1:
        raise InvalidArgumentError("batch_size must be >= 1")
    n = dataset.n
    if shuffle:
        order = np.random.default_rng(seed).permutation(n)
    else:
        order = np.arange(n)
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        images = dataset.images[idx].reshape(len(idx), *dataset.shape)
        yield ImageBatch(images=images, indices=idx)
