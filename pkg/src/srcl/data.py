"""Datasets, splits, label masking, batching and the view augmentation pipeline."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

from .losses import UNLABELED
from .numerics import RandomStream

DEFAULT_MEAN = (0.485, 0.456, 0.406)
DEFAULT_STD = (0.229, 0.224, 0.225)
LUMA = np.array([0.299, 0.587, 0.114])


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class LabeledImage:
    id: str
    pixels: np.ndarray  # C x H x W in [0, 1]
    label: int = UNLABELED


@dataclass
class Dataset:
    """Images stacked as an N x C x H x W float32 array with parallel ids and labels."""

    ids: tuple[str, ...]
    pixels: np.ndarray
    labels: np.ndarray
    class_names: tuple[str, ...]

    def __post_init__(self):
        self.ids = tuple(self.ids)
        self.class_names = tuple(self.class_names)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if not (len(self.ids) == len(self.pixels) == len(self.labels)):
            raise DataError("ids, pixels and labels must have equal length")
        bad = (self.labels != UNLABELED) & ((self.labels < 0) | (self.labels >= len(self.class_names)))
        if bad.any():
            raise DataError(f"labels out of range for {len(self.class_names)} classes")

    def __len__(self) -> int:
        return len(self.ids)

    def __getitem__(self, i: int) -> LabeledImage:
        return LabeledImage(self.ids[i], self.pixels[i], int(self.labels[i]))

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    @property
    def labeled_mask(self) -> np.ndarray:
        return self.labels != UNLABELED

    def subset(self, indices) -> "Dataset":
        indices = np.asarray(indices, dtype=np.int64)
        return Dataset(
            tuple(self.ids[i] for i in indices),
            self.pixels[indices],
            self.labels[indices],
            self.class_names,
        )

    def class_counts(self) -> np.ndarray:
        lab = self.labels[self.labels != UNLABELED]
        return np.bincount(lab, minlength=self.num_classes)


@dataclass(frozen=True)
class AugmentConfig:
    crop_scale_range: tuple[float, float] = (0.6, 1.0)
    brightness: float = 0.4
    contrast: float = 0.4
    saturation: float = 0.4
    grayscale_probability: float = 0.2
    mean: tuple[float, ...] = DEFAULT_MEAN
    std: tuple[float, ...] = DEFAULT_STD

    def __post_init__(self):
        lo, hi = self.crop_scale_range
        if not (0.0 < lo <= hi <= 1.0):
            raise DataError("crop_scale_range must satisfy 0 < min <= max <= 1")
        if not 0.0 <= self.grayscale_probability <= 1.0:
            raise DataError("grayscale_probability must lie in [0, 1]")
        for name in ("brightness", "contrast", "saturation"):
            if getattr(self, name) < 0:
                raise DataError(f"{name} strength must be >= 0")
        if len(self.mean) != len(self.std) or any(s <= 0 for s in self.std):
            raise DataError("normalization mean/std must have equal length and positive std")

    @classmethod
    def identity(cls, channels: int = 3) -> "AugmentConfig":
        return cls((1.0, 1.0), 0.0, 0.0, 0.0, 0.0, (0.0,) * channels, (1.0,) * channels)


@dataclass
class Batch:
    images: np.ndarray
    labels: np.ndarray
    indices: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    @property
    def labeled(self) -> np.ndarray:
        return self.labels != UNLABELED

    def __len__(self) -> int:
        return len(self.labels)


# --- image files ------------------------------------------------------------


def read_image(path: str | Path) -> np.ndarray:
    """Decode an image file to a C x H x W float32 array in [0, 1]."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


def write_ppm(path: str | Path, pixels: np.ndarray) -> None:
    arr = np.clip(np.rint(pixels.transpose(1, 2, 0) * 255.0), 0, 255).astype(np.uint8)
    if arr.shape[2] == 1:
        arr = np.repeat(arr, 3, axis=2)
    Image.fromarray(arr, "RGB").save(path, format="PPM")


def write_pgm(path: str | Path, values: np.ndarray) -> None:
    """Write an H x W array of values in [0, 1] as 8-bit binary PGM, round(255 v)."""
    arr = np.clip(np.rint(np.asarray(values, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr, "L").save(path, format="PPM")


def load_dataset(image_dir: str | Path, labels_csv: str | Path, class_names: Sequence[str]) -> Dataset:
    image_dir = Path(image_dir)
    index = {name: i for i, name in enumerate(class_names)}
    ids, pixels, labels = [], [], []
    with open(labels_csv, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["image", "label"]:
            raise DataError(f"{labels_csv}:1: header must be 'image,label', got {header}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 2:
                raise DataError(f"{labels_csv}:{lineno}: expected 2 fields, got {len(row)}")
            name, label = row[0].strip(), row[1].strip()
            if label not in index:
                raise DataError(f"{labels_csv}:{lineno}: unknown class {label!r}")
            path = image_dir / name
            if not path.is_file():
                raise DataError(f"{labels_csv}:{lineno}: missing image file {name!r}")
            ids.append(Path(name).stem)
            pixels.append(read_image(path))
            labels.append(index[label])
    if not ids:
        raise DataError(f"{labels_csv}: no images listed")
    shapes = {p.shape for p in pixels}
    if len(shapes) != 1:
        raise DataError(f"images have differing shapes: {sorted(shapes)}")
    return Dataset(tuple(ids), np.stack(pixels), np.array(labels), tuple(class_names))


def save_dataset(dataset: Dataset, out_dir: str | Path) -> Path:
    """Write PPM files plus labels.csv; unlabeled images are skipped from the CSV."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for i, image_id in enumerate(dataset.ids):
        fname = f"{image_id}.ppm"
        write_ppm(out_dir / fname, dataset.pixels[i])
        if dataset.labels[i] != UNLABELED:
            rows.append((fname, dataset.class_names[dataset.labels[i]]))
    csv_path = out_dir / "labels.csv"
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["image", "label"])
        writer.writerows(rows)
    return csv_path


# --- synthetic data ----------------------------------------------------------

_PALETTE = np.array(
    [
        [0.80, 0.35, 0.30],
        [0.35, 0.65, 0.35],
        [0.35, 0.40, 0.80],
        [0.80, 0.70, 0.30],
        [0.65, 0.35, 0.75],
        [0.30, 0.70, 0.75],
        [0.85, 0.55, 0.65],
        [0.55, 0.45, 0.30],
    ]
)
_SHAPES = ("disk", "square", "ring", "cross", "diamond", "hbar", "vbar", "dots")


def class_frequencies(num_classes: int, imbalance_ratio: float) -> np.ndarray:
    """Geometric class profile: frequency of class c proportional to ratio^(-c/(K-1))."""
    if num_classes < 2:
        raise DataError("need at least 2 classes")
    if imbalance_ratio < 1:
        raise DataError("imbalance_ratio must be >= 1")
    w = imbalance_ratio ** (-np.arange(num_classes) / (num_classes - 1))
    return w / w.sum()


def _apportion(total: int, weights: np.ndarray) -> np.ndarray:
    """Largest-remainder rounding of total * weights to integers summing to total."""
    ideal = total * np.asarray(weights, dtype=np.float64)
    counts = np.floor(ideal + 1e-9).astype(np.int64)
    short = total - counts.sum()
    order = np.argsort(-(ideal - counts), kind="stable")
    counts[order[:short]] += 1
    return counts


def _shape_mask(shape: str, size: int, cy: float, cx: float, radius: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    r = np.hypot(dy, dx)
    if shape == "disk":
        return r <= radius
    if shape == "square":
        return (np.abs(dy) <= radius * 0.85) & (np.abs(dx) <= radius * 0.85)
    if shape == "ring":
        return (r <= radius) & (r >= radius * 0.55)
    if shape == "cross":
        arm = radius * 0.35
        return ((np.abs(dy) <= arm) & (np.abs(dx) <= radius)) | ((np.abs(dx) <= arm) & (np.abs(dy) <= radius))
    if shape == "diamond":
        return np.abs(dy) + np.abs(dx) <= radius * 1.2
    if shape == "hbar":
        return (np.abs(dy) <= radius * 0.4) & (np.abs(dx) <= radius * 1.2)
    if shape == "vbar":
        return (np.abs(dx) <= radius * 0.4) & (np.abs(dy) <= radius * 1.2)
    # dots: two small disks
    off = radius * 0.6
    return (np.hypot(dy, dx - off) <= radius * 0.45) | (np.hypot(dy, dx + off) <= radius * 0.45)


def generate_synthetic(
    num_images: int,
    num_classes: int,
    image_size: int = 32,
    imbalance_ratio: float = 1.0,
    seed: int = 0,
    noise: float = 0.08,
    color_jitter: float = 0.18,
) -> Dataset:
    """Deterministic toy dataset: one colored blob family per class over a noisy background."""
    if num_images < 1 or image_size < 4:
        raise DataError("num_images must be >= 1 and image_size >= 4")
    counts = _apportion(num_images, class_frequencies(num_classes, imbalance_ratio))
    labels = np.repeat(np.arange(num_classes), counts)
    labels = labels[RandomStream(seed).split("synthetic", "order").permutation(num_images)]
    pixels = np.empty((num_images, 3, image_size, image_size), dtype=np.float32)
    for i, c in enumerate(labels):
        rng = RandomStream(seed).split("synthetic", "image", i)
        background = rng.uniform(0.25, 0.55) + rng.normal(0.0, 0.04, size=3)
        img = np.broadcast_to(background[:, None, None], (3, image_size, image_size)).copy()
        img += rng.normal(0.0, noise, size=img.shape)
        radius = image_size * rng.uniform(0.18, 0.3)
        margin = radius + 1
        cy = rng.uniform(margin, image_size - 1 - margin) if image_size - 1 - margin > margin else image_size / 2
        cx = rng.uniform(margin, image_size - 1 - margin) if image_size - 1 - margin > margin else image_size / 2
        color = _PALETTE[c % len(_PALETTE)] + rng.normal(0.0, color_jitter, size=3)
        mask = _shape_mask(_SHAPES[c % len(_SHAPES)], image_size, cy, cx, radius)
        img[:, mask] = color[:, None] + rng.normal(0.0, noise, size=(3, int(mask.sum())))
        pixels[i] = np.clip(img, 0.0, 1.0)
    ids = tuple(f"img{i:05d}" for i in range(num_images))
    names = tuple(f"class{c}" for c in range(num_classes))
    return Dataset(ids, pixels, labels, names)


# --- splitting and masking ------------------------------------------------------


def _controlled_rounding(class_sizes: np.ndarray, targets: np.ndarray, fractions: np.ndarray) -> np.ndarray:
    """Integer class x split table with the given margins, each cell floor or ceil of ideal."""
    ideal = class_sizes[:, None] * fractions[None, :]
    table = np.floor(ideal + 1e-9).astype(np.int64)
    row_need = class_sizes - table.sum(axis=1)
    col_need = targets - table.sum(axis=0)
    frac = ideal - table
    # Gale-Ryser greedy: rows with most extras first, each to the neediest columns.
    for c in np.argsort(-row_need, kind="stable"):
        k = int(row_need[c])
        if k == 0:
            continue
        order = sorted(range(len(targets)), key=lambda j: (-col_need[j], -frac[c, j], j))
        chosen = [j for j in order if col_need[j] > 0][:k]
        if len(chosen) < k:
            raise DataError("cannot build a stratified split with these fractions")
        for j in chosen:
            table[c, j] += 1
            col_need[j] -= 1
    return table


def split(dataset: Dataset, fractions=(0.7, 0.1, 0.2), seed: int = 0) -> tuple[Dataset, ...]:
    """Stratified, disjoint split; images without labels form their own stratum."""
    fractions = np.asarray(fractions, dtype=np.float64)
    if abs(fractions.sum() - 1.0) > 1e-6 or (fractions < 0).any():
        raise DataError(f"split fractions must be non-negative and sum to 1, got {fractions.tolist()}")
    strata = np.unique(dataset.labels)
    members = [np.flatnonzero(dataset.labels == s) for s in strata]
    sizes = np.array([len(m) for m in members])
    targets = _apportion(len(dataset), fractions)
    table = _controlled_rounding(sizes, targets, fractions)
    parts: list[list[int]] = [[] for _ in fractions]
    root = RandomStream(seed).split("split")
    for s, idx, row in zip(strata, members, table):
        perm = idx[root.split(int(s)).permutation(len(idx))]
        bounds = np.concatenate([[0], np.cumsum(row)])
        for j in range(len(fractions)):
            parts[j].extend(perm[bounds[j] : bounds[j + 1]].tolist())
    return tuple(dataset.subset(sorted(p)) for p in parts)


def mask_labels(train: Dataset, labeled_fraction: float, seed: int = 0) -> Dataset:
    """Keep ceil(fraction * n_c) labels in every class c; the rest become UNLABELED."""
    if not 0.0 < labeled_fraction <= 1.0:
        raise DataError(f"labeled_fraction must lie in (0, 1], got {labeled_fraction}")
    labels = train.labels.copy()
    root = RandomStream(seed).split("mask")
    for c in range(train.num_classes):
        idx = np.flatnonzero(train.labels == c)
        keep = min(len(idx), math.ceil(labeled_fraction * len(idx) - 1e-9))
        perm = root.split(c).permutation(len(idx))
        labels[idx[perm[keep:]]] = UNLABELED
    return replace(train, labels=labels)


def make_batches(dataset: Dataset, batch_size: int, epoch: int, seed: int = 0) -> list[Batch]:
    """Shuffle keyed by (seed, epoch); the trailing partial batch is dropped."""
    if batch_size < 2:
        raise DataError("batch_size must be >= 2")
    perm = RandomStream(seed).split("batch", epoch).permutation(len(dataset))
    batches = []
    for start in range(0, len(perm) - batch_size + 1, batch_size):
        idx = perm[start : start + batch_size]
        batches.append(Batch(dataset.pixels[idx], dataset.labels[idx], idx))
    return batches


# --- augmentation -------------------------------------------------------------


def _gray(img: np.ndarray) -> np.ndarray:
    if img.shape[0] == 3:
        return np.tensordot(LUMA, img, axes=1).astype(img.dtype)
    return img.mean(axis=0)


def normalize(image: np.ndarray, config: AugmentConfig) -> np.ndarray:
    mean = np.asarray(config.mean, dtype=np.float32)[:, None, None]
    std = np.asarray(config.std, dtype=np.float32)[:, None, None]
    return ((image - mean) / std).astype(np.float32)


def augment_view(image: np.ndarray, config: AugmentConfig, stream: RandomStream) -> np.ndarray:
    """Random area crop (nearest-neighbor resize), color jitter, grayscale, normalize.

    A fixed number of draws is taken regardless of config so that one stream
    state always maps to the same transform.
    """
    c, h, w = image.shape
    u = stream.uniform(size=9)
    lo, hi = config.crop_scale_range
    scale = lo + (hi - lo) * u[0]
    ch = max(1, min(h, int(round(math.sqrt(scale) * h))))
    cw = max(1, min(w, int(round(math.sqrt(scale) * w))))
    top = min(h - ch, int(u[1] * (h - ch + 1)))
    left = min(w - cw, int(u[2] * (w - cw + 1)))
    img = image[:, top : top + ch, left : left + cw]
    if (ch, cw) != (h, w):
        rows = (np.arange(h) * ch) // h
        cols = (np.arange(w) * cw) // w
        img = img[:, rows][:, :, cols]
    img = np.array(img, dtype=np.float32)

    if config.brightness > 0:
        f = 1.0 + config.brightness * (2.0 * u[3] - 1.0)
        img = np.clip(img * f, 0.0, 1.0)
    if config.contrast > 0:
        f = 1.0 + config.contrast * (2.0 * u[4] - 1.0)
        m = _gray(img).mean()
        img = np.clip((img - m) * f + m, 0.0, 1.0)
    if config.saturation > 0:
        f = 1.0 + config.saturation * (2.0 * u[5] - 1.0)
        g = _gray(img)[None]
        img = np.clip((img - g) * f + g, 0.0, 1.0)
    if u[6] < config.grayscale_probability:
        img = np.repeat(_gray(img)[None], c, axis=0)
    return normalize(img.astype(np.float32), config)


def make_contrastive_views(batch: Batch, config: AugmentConfig, stream: RandomStream) -> np.ndarray:
    """2N views; rows 2k and 2k+1 are two independent augmentations of original k.

    Each view's transform comes from ``stream.split(dataset_index, view)``, so a
    sample's views do not depend on its position in the batch.
    """
    keys = batch.indices if len(batch.indices) == len(batch) else np.arange(len(batch))
    views = []
    for img, key in zip(batch.images, keys):
        for v in (0, 1):
            views.append(augment_view(img, config, stream.split(int(key), v)))
    return np.stack(views)
