"""
Datasets: toy Gaussians, IDX and CSV loaders, subsampling, gradient-budget
schedules and image augmentation.
"""
import csv
import gzip
import logging
import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Tuple

import cv2
import numpy as np

from config import (
    AUGMENT_BRIGHTNESS,
    AUGMENT_CONTRAST,
    AUGMENT_KINDS,
    AUGMENT_PAD,
    IDX_IMAGE_MAGIC,
    IDX_LABEL_MAGIC,
    TOY_MEANS,
)

logger = logging.getLogger(__name__)


@dataclass
class LabeledDataset:
    """
    Features (n x p), integer labels, optional raw labeller counts (n x C)

    Treat instances as immutable: helpers return new datasets.
    """
    features: np.ndarray
    labels: np.ndarray
    num_classes: int
    counts: Optional[np.ndarray] = None
    name: str = "dataset"
    image_shape: Optional[Tuple[int, int, int]] = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2:
            raise ValueError(f"Features must be a matrix, got shape {self.features.shape}")
        if self.labels.shape != (self.features.shape[0],):
            raise ValueError(f"{self.labels.shape[0]} labels for {self.features.shape[0]} rows")
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError(f"Labels must lie in [0, {self.num_classes})")
        if self.counts is not None:
            self.counts = np.asarray(self.counts, dtype=np.int64)
            if self.counts.shape != (self.n, self.num_classes):
                raise ValueError(f"Counts have shape {self.counts.shape}, expected ({self.n}, {self.num_classes})")
            if np.any(self.counts < 0) or np.any(self.counts.sum(axis=1) < 1):
                raise ValueError("Every counts row must be non-negative with at least one count")
        if self.image_shape is not None:
            self.image_shape = tuple(int(s) for s in self.image_shape)
            if int(np.prod(self.image_shape)) != self.features.shape[1]:
                raise ValueError(f"image_shape {self.image_shape} does not match {self.features.shape[1]} features")

    @property
    def n(self):
        return self.features.shape[0]

    @property
    def input_dim(self):
        return self.features.shape[1]

    def take(self, indices, name=None, labels=None):
        """New dataset made of the given rows (optionally relabelled)"""
        indices = np.asarray(indices, dtype=np.int64)
        return replace(
            self,
            features=self.features[indices],
            labels=self.labels[indices] if labels is None else labels,
            counts=self.counts[indices] if self.counts is not None else None,
            name=name or self.name,
            meta=dict(self.meta),
        )

    def class_frequencies(self):
        return np.bincount(self.labels, minlength=self.num_classes) / max(self.n, 1)


# ---------------- Toy Data ----------------
def gen_toy_gaussians(n, seed):
    """
    Two unit-variance 2D Gaussians at (-1,-1) and (1,1), n/2 points each

    The Bayes-optimal boundary is the line y = -x.
    """
    if n < 2 or n % 2:
        raise ValueError(f"Toy dataset size must be a positive even number, got {n}")
    rng = np.random.default_rng(seed)
    half = n // 2
    means = np.repeat(np.asarray(TOY_MEANS), half, axis=0)
    features = means + rng.standard_normal((n, 2))
    labels = np.repeat([0, 1], half)
    order = rng.permutation(n)
    return LabeledDataset(features[order], labels[order], num_classes=2, name=f"toy{n}")


# ---------------- IDX Loader ----------------
def _read_bytes(path):
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as f:
        return f.read()


def _parse_idx(raw, expected_magic, path):
    if len(raw) < 8:
        raise ValueError(f"{path}: truncated IDX header")
    magic = struct.unpack(">i", raw[:4])[0]
    if magic != expected_magic:
        raise ValueError(f"{path}: magic number mismatch (got 0x{magic:08x}, expected 0x{expected_magic:08x})")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise ValueError(f"{path}: truncated IDX header")
    dims = struct.unpack(f">{ndim}i", raw[4:header])
    size = int(np.prod(dims))
    if len(raw) - header < size:
        raise ValueError(f"{path}: truncated payload ({len(raw) - header} of {size} bytes)")
    return np.frombuffer(raw, dtype=np.uint8, count=size, offset=header).reshape(dims)


def load_idx(images_path, labels_path):
    """
    Load an IDX image/label pair (MNIST layout, optionally gzip-compressed)

    Returns:
        LabeledDataset with pixels scaled to [0, 1] and C = 10
    """
    images = _parse_idx(_read_bytes(images_path), IDX_IMAGE_MAGIC, images_path)
    labels = _parse_idx(_read_bytes(labels_path), IDX_LABEL_MAGIC, labels_path)
    if images.shape[0] != labels.shape[0]:
        raise ValueError(f"Count mismatch: {images.shape[0]} images vs {labels.shape[0]} labels")
    n, rows, cols = images.shape
    features = images.reshape(n, rows * cols).astype(np.float64) / 255.0
    logger.info("[DATA] Loaded %d images of %dx%d from %s", n, rows, cols, images_path)
    return LabeledDataset(
        features,
        labels.astype(np.int64),
        num_classes=10,
        name=Path(images_path).name.split(".")[0],
        image_shape=(rows, cols, 1),
        meta={"preprocessing": "pixels / 255"},
    )


# ---------------- CSV Format ----------------
def save_csv(dataset, path):
    """Write `x0..xp-1,label[,c0..cC-1]`"""
    header = [f"x{j}" for j in range(dataset.input_dim)] + ["label"]
    if dataset.counts is not None:
        header += [f"c{j}" for j in range(dataset.num_classes)]
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(header)
        for i in range(dataset.n):
            row = [repr(float(v)) for v in dataset.features[i]] + [int(dataset.labels[i])]
            if dataset.counts is not None:
                row += [int(c) for c in dataset.counts[i]]
            writer.writerow(row)


def load_csv(path, num_classes=None):
    """
    Read the CSV dataset format

    Args:
        path: CSV file with header `x0,...,xp-1,label[,c0..cC-1]`
        num_classes: Class count when there are no count columns (default max label + 1)

    Raises:
        ValueError naming the offending line for malformed rows
    """
    with open(path, newline="") as f:
        reader = csv.reader(f)
        try:
            header = next(reader)
        except StopIteration:
            raise ValueError(f"{path}: empty file")
        if "label" not in header:
            raise ValueError(f"{path}:1: header has no 'label' column")
        label_col = header.index("label")
        if header[:label_col] != [f"x{j}" for j in range(label_col)]:
            raise ValueError(f"{path}:1: feature columns must be x0..x{label_col - 1}")
        count_cols = header[label_col + 1:]
        if count_cols and count_cols != [f"c{j}" for j in range(len(count_cols))]:
            raise ValueError(f"{path}:1: count columns must be c0..c{len(count_cols) - 1}")

        features, labels, counts = [], [], []
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise ValueError(f"{path}:{line_no}: expected {len(header)} fields, got {len(row)}")
            try:
                features.append([float(v) for v in row[:label_col]])
                labels.append(int(row[label_col]))
                if count_cols:
                    counts.append([int(v) for v in row[label_col + 1:]])
            except ValueError as e:
                raise ValueError(f"{path}:{line_no}: {e}") from None
            if not all(math.isfinite(v) for v in features[-1]):
                raise ValueError(f"{path}:{line_no}: non-finite feature value")
            if labels[-1] < 0 or (count_cols and labels[-1] >= len(count_cols)):
                raise ValueError(f"{path}:{line_no}: label {labels[-1]} out of range")
            if count_cols and (min(counts[-1]) < 0 or sum(counts[-1]) < 1):
                raise ValueError(f"{path}:{line_no}: counts must be non-negative with at least one count")

    if not labels:
        raise ValueError(f"{path}: no data rows")
    if count_cols:
        num_classes = len(count_cols)
    elif num_classes is None:
        num_classes = max(2, max(labels) + 1)
    return LabeledDataset(
        np.asarray(features, dtype=np.float64).reshape(len(labels), label_col),
        np.asarray(labels, dtype=np.int64),
        num_classes=num_classes,
        counts=np.asarray(counts, dtype=np.int64) if count_cols else None,
        name=Path(path).stem,
    )


# ---------------- Subsampling ----------------
def subsample(dataset, m, seed):
    """Uniform sample of m rows without replacement"""
    if not 1 <= m <= dataset.n:
        raise ValueError(f"Subsample size must lie in [1, {dataset.n}], got {m}")
    rng = np.random.default_rng(seed)
    idx = rng.choice(dataset.n, size=m, replace=False)
    return dataset.take(idx, name=f"{dataset.name}_n{m}")


def train_test_split(dataset, test_fraction, seed):
    if not 0.0 < test_fraction < 1.0:
        raise ValueError(f"test_fraction must lie in (0, 1), got {test_fraction}")
    n_test = int(round(dataset.n * test_fraction))
    if n_test < 1 or n_test >= dataset.n:
        raise ValueError(f"Split of {dataset.n} rows at {test_fraction} leaves one side empty")
    perm = np.random.default_rng(seed).permutation(dataset.n)
    return dataset.take(perm[n_test:], name=f"{dataset.name}_train"), dataset.take(perm[:n_test], name=f"{dataset.name}_test")


# ---------------- Gradient Budget ----------------
class BudgetInfeasibleError(ValueError):
    def __init__(self, message, suggestion=None):
        super().__init__(message)
        self.suggestion = suggestion


def steps_per_epoch(n, batch_size):
    """Minibatches per epoch; batch_size None means full batch"""
    if batch_size is None or batch_size >= n:
        return 1
    return math.ceil(n / batch_size)


@dataclass(frozen=True)
class BudgetSchedule:
    n: int
    epochs: int
    burn_in_epochs: int
    cycle_epochs: int
    batch_size: Optional[int] = None

    def __post_init__(self):
        if self.n < 1 or self.epochs < 1 or self.cycle_epochs < 1 or self.burn_in_epochs < 0:
            raise ValueError(f"Invalid schedule: {self}")
        if self.batch_size is not None and self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs <= self.burn_in_epochs:
            raise ValueError(f"epochs ({self.epochs}) must exceed burn-in ({self.burn_in_epochs})")
        if (self.epochs - self.burn_in_epochs) % self.cycle_epochs:
            raise ValueError(f"{self.epochs - self.burn_in_epochs} post-burn-in epochs are not whole cycles of {self.cycle_epochs}")

    @property
    def total_gradient_steps(self):
        return steps_per_epoch(self.n, self.batch_size) * self.epochs

    @property
    def num_samples(self):
        return (self.epochs - self.burn_in_epochs) // self.cycle_epochs


def _nearest_feasible_n(total_steps, batch_size, n_sub):
    divisors = [d for d in range(1, total_steps + 1) if total_steps % d == 0]
    best = min(divisors, key=lambda d: abs(d * batch_size - n_sub))
    return best * batch_size


def schedule_for_budget(reference, n_sub):
    """
    Rescale a reference schedule to n_sub keeping the gradient budget and K fixed

    Epochs scale by the ratio of steps per epoch. Cycle length is rounded up
    when the ratio is fractional and the burn-in absorbs the difference.

    Raises:
        BudgetInfeasibleError when no whole number of epochs hits the budget
    """
    if n_sub < 1:
        raise ValueError(f"n_sub must be >= 1, got {n_sub}")
    if n_sub == reference.n:
        return reference
    total = reference.total_gradient_steps
    spe = steps_per_epoch(n_sub, reference.batch_size)
    if total % spe:
        suggestion = _nearest_feasible_n(total, reference.batch_size, n_sub)
        raise BudgetInfeasibleError(
            f"No whole number of epochs gives {total} gradient steps at n={n_sub} "
            f"({spe} steps per epoch); nearest feasible size is n={suggestion}",
            suggestion=suggestion,
        )
    epochs = total // spe
    ratio = epochs / reference.epochs
    k = reference.num_samples
    cycle = math.ceil(reference.cycle_epochs * ratio - 1e-9)
    burn_in = epochs - k * cycle
    if burn_in < 0:
        raise BudgetInfeasibleError(f"Cycles of {cycle} epochs do not fit {k} samples in {epochs} epochs at n={n_sub}")
    return BudgetSchedule(n=n_sub, epochs=epochs, burn_in_epochs=burn_in, cycle_epochs=cycle, batch_size=reference.batch_size)


# ---------------- Augmentation ----------------
def pad_and_crop(image, offset, pad=AUGMENT_PAD):
    """Zero-pad by `pad` pixels and crop back to the original size at offset (row, col)"""
    h, w, c = image.shape
    padded = cv2.copyMakeBorder(image, pad, pad, pad, pad, cv2.BORDER_CONSTANT, value=0).reshape(h + 2 * pad, w + 2 * pad, c)
    r, s = offset
    return padded[r:r + h, s:s + w, :]


def flip_left_right(image):
    return cv2.flip(image, 1).reshape(image.shape)


def adjust_brightness(image, delta):
    """Add delta, a scalar or one shift per channel"""
    return image + np.asarray(delta, dtype=np.float64)


def adjust_contrast(image, factor):
    """(x - mean) * factor + mean, per channel"""
    mean = image.mean(axis=(0, 1), keepdims=True)
    return (image - mean) * factor + mean


def augment_batch(images, kind, rng, pad=AUGMENT_PAD):
    """
    Augment a batch of square images (B x H x W x C), one random draw per image

    flip_crop: random left/right flip, then a random crop of the zero-padded image.
    brightness_contrast_crop: random contrast in [0.45, 0.55], a brightness shift in
    [-0.15, 0.15] drawn per channel, then the random crop.
    """
    images = np.asarray(images, dtype=np.float64)
    if images.ndim != 4 or images.shape[1] != images.shape[2]:
        raise ValueError(f"augment_batch needs square images (B, H, W, C), got shape {images.shape}")
    if kind not in AUGMENT_KINDS:
        raise ValueError(f"Unknown augmentation kind: {kind}")
    out = np.empty_like(images)
    for i, image in enumerate(images):
        if kind == "flip_crop":
            if rng.random() < 0.5:
                image = flip_left_right(image)
        else:
            image = adjust_contrast(image, rng.uniform(*AUGMENT_CONTRAST))
            image = adjust_brightness(image, rng.uniform(*AUGMENT_BRIGHTNESS, size=image.shape[2]))
        offset = rng.integers(0, 2 * pad + 1, size=2)
        out[i] = pad_and_crop(np.ascontiguousarray(image), offset, pad)
    return out
