"""Datasets and batching for the training loops.

Three synthetic 2-D generators (moons, blobs, rings) plus an IDX image
reader cover the laptop-sized regime.  Splitting hides labels from the
unlabeled pool but keeps the ground truth around so pseudo-label
precision can be measured.  All randomness flows through explicit
numpy Generators.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

GENERATOR_TAGS = ("two_moons", "gaussian_blobs", "circles", "idx_file")

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801


class IdxFormatError(Exception):
    """Raised when an IDX file is malformed, truncated, or mismatched."""


@dataclass
class Example:
    """One sample.  label is None when the learner must not see it."""

    features: np.ndarray
    label: int | None
    true_label: int


@dataclass
class DatasetSpec:
    generator: str
    n_samples: int = 0
    noise_sigma: float = 0.0
    num_classes: int = 2
    seed: int = 0
    labels_per_class: int = 0
    # only read by the idx_file generator
    images_path: str | None = None
    labels_path: str | None = None

    def validate(self) -> None:
        if self.generator not in GENERATOR_TAGS:
            raise ValueError(
                f"unknown generator {self.generator!r}; expected one of "
                f"{GENERATOR_TAGS}"
            )
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if self.labels_per_class * self.num_classes > self.n_samples > 0:
            raise ValueError("labels_per_class * num_classes exceeds n_samples")


@dataclass
class AugmentationSpec:
    """Weak = jitter; strong = bigger jitter plus coordinate dropout."""

    weak_jitter_sigma: float = 0.05
    strong_jitter_sigma: float = 0.25
    strong_mask_prob: float = 0.2

    def validate(self) -> None:
        if self.weak_jitter_sigma < 0 or self.strong_jitter_sigma < 0:
            raise ValueError("jitter sigmas must be >= 0")
        if not 0.0 <= self.strong_mask_prob <= 1.0:
            raise ValueError("strong_mask_prob must lie in [0, 1]")
        if self.strong_jitter_sigma < self.weak_jitter_sigma:
            raise ValueError("strong jitter must be at least as large as weak")


def _class_counts(n: int, num_classes: int) -> list:
    """Split n into num_classes counts differing by at most one."""
    base = n // num_classes
    counts = [base] * num_classes
    for c in range(n - base * num_classes):
        counts[c] += 1
    return counts


def _two_moons(n: int, noise: float, rng) -> tuple[np.ndarray, np.ndarray]:
    n0, n1 = _class_counts(n, 2)
    t0 = np.linspace(0.0, np.pi, n0)
    t1 = np.linspace(0.0, np.pi, n1)
    upper = np.column_stack([np.cos(t0), np.sin(t0)])
    lower = np.column_stack([1.0 - np.cos(t1), 0.5 - np.sin(t1)])
    x = np.vstack([upper, lower])
    y = np.concatenate([np.zeros(n0, dtype=np.int64), np.ones(n1, dtype=np.int64)])
    x += rng.normal(0.0, noise, size=x.shape) if noise > 0 else 0.0
    return x, y


def _gaussian_blobs(
    n: int, noise: float, num_classes: int, rng
) -> tuple[np.ndarray, np.ndarray]:
    counts = _class_counts(n, num_classes)
    angles = 2.0 * np.pi * np.arange(num_classes) / num_classes
    centers = 3.0 * np.column_stack([np.cos(angles), np.sin(angles)])
    xs, ys = [], []
    for c, cnt in enumerate(counts):
        pts = centers[c] + rng.normal(0.0, noise, size=(cnt, 2))
        xs.append(pts)
        ys.append(np.full(cnt, c, dtype=np.int64))
    return np.vstack(xs), np.concatenate(ys)


def _circles(n: int, noise: float, rng) -> tuple[np.ndarray, np.ndarray]:
    n0, n1 = _class_counts(n, 2)
    t0 = np.linspace(0.0, 2.0 * np.pi, n0, endpoint=False)
    t1 = np.linspace(0.0, 2.0 * np.pi, n1, endpoint=False)
    outer = np.column_stack([np.cos(t0), np.sin(t0)])
    inner = 0.5 * np.column_stack([np.cos(t1), np.sin(t1)])
    x = np.vstack([outer, inner])
    y = np.concatenate([np.zeros(n0, dtype=np.int64), np.ones(n1, dtype=np.int64)])
    x += rng.normal(0.0, noise, size=x.shape) if noise > 0 else 0.0
    return x, y


def generate(spec: DatasetSpec) -> list:
    """Materialize a dataset.  Deterministic in spec.seed; classes balanced."""
    spec.validate()
    if spec.generator == "idx_file":
        if not spec.images_path or not spec.labels_path:
            raise ValueError("idx_file generator needs images_path and labels_path")
        return load_idx(spec.images_path, spec.labels_path)
    rng = np.random.default_rng(spec.seed)
    if spec.generator == "two_moons":
        x, y = _two_moons(spec.n_samples, spec.noise_sigma, rng)
    elif spec.generator == "gaussian_blobs":
        x, y = _gaussian_blobs(spec.n_samples, spec.noise_sigma, spec.num_classes, rng)
    else:
        x, y = _circles(spec.n_samples, spec.noise_sigma, rng)
    return [Example(x[i].copy(), int(y[i]), int(y[i])) for i in range(len(y))]


def split(examples, labels_per_class: int, seed: int):
    """Partition into (D_L, D_U).

    Picks labels_per_class members of each class uniformly at random,
    keeps their labels, and masks everyone else's label to None (the
    true label stays on the example for diagnostics only).
    """
    rng = np.random.default_rng(seed)
    by_class: dict[int, list] = {}
    for idx, ex in enumerate(examples):
        by_class.setdefault(ex.true_label, []).append(idx)
    labeled_idx = set()
    for cls in sorted(by_class):
        members = by_class[cls]
        if len(members) < labels_per_class:
            raise ValueError(
                f"class {cls} has {len(members)} members, need {labels_per_class}"
            )
        chosen = rng.choice(len(members), size=labels_per_class, replace=False)
        labeled_idx.update(members[i] for i in chosen)
    d_l, d_u = [], []
    for idx, ex in enumerate(examples):
        if idx in labeled_idx:
            d_l.append(Example(ex.features.copy(), ex.true_label, ex.true_label))
        else:
            d_u.append(Example(ex.features.copy(), None, ex.true_label))
    return d_l, d_u


def weak_augment(x: np.ndarray, spec: AugmentationSpec, rng) -> np.ndarray:
    """Gaussian jitter at the weak sigma.  Shape-preserving."""
    if spec.weak_jitter_sigma == 0.0:
        return x.copy()
    return x + rng.normal(0.0, spec.weak_jitter_sigma, size=x.shape)


def strong_augment(x: np.ndarray, spec: AugmentationSpec, rng) -> np.ndarray:
    """Jitter at the strong sigma, then zero coordinates independently."""
    out = x + rng.normal(0.0, spec.strong_jitter_sigma, size=x.shape)
    if spec.strong_mask_prob > 0.0:
        keep = rng.random(size=x.shape) >= spec.strong_mask_prob
        out = out * keep
    return out


def load_idx(images_path, labels_path) -> list:
    """Read an IDX image/label file pair into examples.

    Images must start with magic 0x00000803 (unsigned bytes, 3 dims),
    labels with 0x00000801.  Pixels are scaled to [0, 1].
    """
    img_raw = Path(images_path).read_bytes()
    lbl_raw = Path(labels_path).read_bytes()
    if len(img_raw) < 16:
        raise IdxFormatError(f"{images_path}: shorter than the IDX image header")
    if len(lbl_raw) < 8:
        raise IdxFormatError(f"{labels_path}: shorter than the IDX label header")
    magic, n_img, rows, cols = struct.unpack(">IIII", img_raw[:16])
    if magic != IDX_IMAGE_MAGIC:
        raise IdxFormatError(
            f"{images_path}: bad magic 0x{magic:08x}, expected 0x{IDX_IMAGE_MAGIC:08x}"
        )
    lbl_magic, n_lbl = struct.unpack(">II", lbl_raw[:8])
    if lbl_magic != IDX_LABEL_MAGIC:
        raise IdxFormatError(
            f"{labels_path}: bad magic 0x{lbl_magic:08x}, "
            f"expected 0x{IDX_LABEL_MAGIC:08x}"
        )
    if n_img != n_lbl:
        raise IdxFormatError(f"{n_img} images but {n_lbl} labels")
    n_pix = rows * cols
    if len(img_raw) - 16 < n_img * n_pix:
        raise IdxFormatError(f"{images_path}: truncated pixel payload")
    if len(lbl_raw) - 8 < n_lbl:
        raise IdxFormatError(f"{labels_path}: truncated label payload")
    pixels = np.frombuffer(img_raw, dtype=np.uint8, count=n_img * n_pix, offset=16)
    pixels = pixels.reshape(n_img, n_pix).astype(np.float64) / 255.0
    labels = np.frombuffer(lbl_raw, dtype=np.uint8, count=n_lbl, offset=8)
    return [Example(pixels[i], int(labels[i]), int(labels[i])) for i in range(n_img)]


def batch_sampler(d_l, d_u, b_l: int, b_u: int, seed: int):
    """Infinite stream of (labeled batch, unlabeled batch) lists.

    Each pool is consumed in shuffled order and reshuffled per epoch,
    so with batch size equal to pool size every yield is a fresh
    permutation.
    """
    if b_l > 0 and not d_l:
        raise ValueError("labeled pool is empty but b_l > 0")
    if b_u > 0 and not d_u:
        raise ValueError("unlabeled pool is empty but b_u > 0")
    rng = np.random.default_rng(seed)

    def cycle(pool):
        order = rng.permutation(len(pool))
        pos = 0
        while True:
            if pos == len(pool):
                order = rng.permutation(len(pool))
                pos = 0
            yield pool[order[pos]]
            pos += 1

    def stream():
        lab = cycle(d_l) if b_l > 0 else None
        unl = cycle(d_u) if b_u > 0 else None
        while True:
            batch_l = [next(lab) for _ in range(b_l)] if lab else []
            batch_u = [next(unl) for _ in range(b_u)] if unl else []
            yield batch_l, batch_u

    return stream()


def stack_features(examples) -> np.ndarray:
    """Contiguous (n, d) float64 matrix of example features."""
    return np.ascontiguousarray([ex.features for ex in examples], dtype=np.float64)


def stack_labels(examples) -> np.ndarray:
    if any(ex.label is None for ex in examples):
        raise ValueError("unlabeled example in a labeled-only stack")
    return np.array([ex.label for ex in examples], dtype=np.int64)


def stack_true_labels(examples) -> np.ndarray:
    return np.array([ex.true_label for ex in examples], dtype=np.int64)


def save_csv(examples, path) -> None:
    """Cache a dataset as CSV: f0..fk,label,true_label (label blank if hidden)."""
    if not examples:
        raise ValueError("refusing to cache an empty dataset")
    dim = len(examples[0].features)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"f{i}" for i in range(dim)] + ["label", "true_label"])
        for ex in examples:
            row = [repr(float(v)) for v in ex.features]
            row.append("" if ex.label is None else str(ex.label))
            row.append(str(ex.true_label))
            writer.writerow(row)


def load_csv(path) -> list:
    """Load a dataset cache written by save_csv."""
    out = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header[-2:] != ["label", "true_label"]:
            raise ValueError(f"{path}: not a dataset cache (header {header[-2:]})")
        dim = len(header) - 2
        for row in reader:
            feats = np.array([float(v) for v in row[:dim]], dtype=np.float64)
            label = None if row[dim] == "" else int(row[dim])
            out.append(Example(feats, label, int(row[dim + 1])))
    return out
