"""Heterogeneous toy tasks: procedural image classification and segmentation.

Sources are pure functions of (generator spec, source seed, sample index):
the same triple yields byte-identical samples on any machine, so no data
ever needs to be shipped or downloaded. Class balance is exact by
construction (the class cycles with the sample index).

Three generator kinds:

* ``shape-class``   — classify the dominant procedural shape on a noisy
  background (disk, square, triangle, ring, cross, diamond).
* ``texture-class`` — classify the global texture family (stripe
  orientations, checkerboard, dot lattice, radial rings).
* ``shape-seg``     — per-pixel labels: 0 background, ``c`` for pixels of a
  shape of class ``c``; one guaranteed primary shape plus an optional
  second one.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .config import SourceSpec, SyntheticGeneratorSpec, TaskSpec

SHAPE_KINDS = ("disk", "square", "triangle", "ring", "cross", "diamond")
TEXTURE_KINDS = ("h-stripes", "v-stripes", "diag-stripes", "checker", "dots", "rings")


def _shape_mask(kind: str, h: int, w: int, cy: float, cx: float, r: float) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    if kind == "disk":
        return dy**2 + dx**2 <= r**2
    if kind == "square":
        return (np.abs(dy) <= r * 0.9) & (np.abs(dx) <= r * 0.9)
    if kind == "triangle":
        # upward triangle: below the apex, inside the two slanted edges
        return (dy >= -r) & (dy <= r * 0.8) & (np.abs(dx) <= (dy + r) * 0.6)
    if kind == "ring":
        d2 = dy**2 + dx**2
        return (d2 <= r**2) & (d2 >= (0.55 * r) ** 2)
    if kind == "cross":
        arm = r * 0.35
        return ((np.abs(dx) <= arm) & (np.abs(dy) <= r)) | (
            (np.abs(dy) <= arm) & (np.abs(dx) <= r)
        )
    if kind == "diamond":
        return np.abs(dy) + np.abs(dx) <= r * 1.2
    raise ValueError(f"unknown shape kind '{kind}'")


def _texture_field(kind: str, h: int, w: int, freq: float, phase: float, angle: float) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    yy, xx = yy / h, xx / w
    two_pi = 2 * np.pi
    if kind == "h-stripes":
        return np.sin(two_pi * freq * yy + phase)
    if kind == "v-stripes":
        return np.sin(two_pi * freq * xx + phase)
    if kind == "diag-stripes":
        rot = xx * np.cos(angle) + yy * np.sin(angle)
        return np.sin(two_pi * freq * rot + phase)
    if kind == "checker":
        return np.sign(np.sin(two_pi * freq * xx + phase) * np.sin(two_pi * freq * yy + phase))
    if kind == "dots":
        return -np.cos(two_pi * freq * xx + phase) * np.cos(two_pi * freq * yy + phase)
    if kind == "rings":
        rr = np.sqrt((xx - 0.5) ** 2 + (yy - 0.5) ** 2)
        return np.sin(two_pi * freq * 2 * rr + phase)
    raise ValueError(f"unknown texture kind '{kind}'")


class SyntheticSource:
    """Deterministic indexable dataset of (image, label) pairs.

    Images are float32 arrays of shape (3, H, W) in [0, 1]; labels are a
    scalar class index for classification kinds or an int64 (H, W) mask for
    segmentation. Generated samples are memoized in process memory.
    """

    def __init__(
        self,
        spec: SyntheticGeneratorSpec,
        size: int,
        seed: int,
        source_id: str = "",
    ):
        if spec.kind in ("shape-class", "shape-seg"):
            limit = len(SHAPE_KINDS) if spec.kind == "shape-class" else len(SHAPE_KINDS) + 1
            if spec.num_classes > limit:
                raise ValueError(
                    f"{spec.kind} supports at most {limit} classes, got {spec.num_classes}"
                )
        if spec.kind == "texture-class" and spec.num_classes > len(TEXTURE_KINDS):
            raise ValueError(
                f"texture-class supports at most {len(TEXTURE_KINDS)} classes"
            )
        self.spec = spec
        self.size = int(size)
        self.seed = int(seed)
        self.source_id = source_id or f"{spec.kind}-{seed}"
        palette_rng = np.random.default_rng([int(spec.palette_seed), 0x9E3779B9])
        # one base color per class plus one background color family
        self._palette = palette_rng.uniform(0.15, 0.95, size=(spec.num_classes + 1, 3))
        self._cache: dict[int, tuple[np.ndarray, np.ndarray | int]] = {}

    def __len__(self) -> int:
        return self.size

    def _rng(self, index: int) -> np.random.Generator:
        return np.random.default_rng([self.seed, int(index), 0x51ED270])

    def class_of(self, index: int) -> int:
        """Balanced class assignment: classes cycle with the index."""
        if self.spec.kind == "shape-seg":
            return index % (self.spec.num_classes - 1) + 1
        return index % self.spec.num_classes

    def __getitem__(self, index: int):
        if not (0 <= index < self.size):
            raise IndexError(index)
        if index not in self._cache:
            self._cache[index] = self._generate(index)
        return self._cache[index]

    def _background(self, rng: np.random.Generator, h: int, w: int) -> np.ndarray:
        base = self._palette[-1] * rng.uniform(0.7, 1.0)
        img = np.broadcast_to(base.reshape(3, 1, 1), (3, h, w)).copy()
        # low-frequency shading so backgrounds are not constant
        yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
        grad = rng.uniform(-0.15, 0.15) * (yy / h) + rng.uniform(-0.15, 0.15) * (xx / w)
        return img + grad[None, :, :]

    def _paint(self, img: np.ndarray, mask: np.ndarray, color: np.ndarray) -> None:
        img[:, mask] = color.reshape(3, 1)

    def _generate(self, index: int):
        spec = self.spec
        h, w = spec.image_size
        rng = self._rng(index)
        cls = self.class_of(index)

        if spec.kind == "texture-class":
            freq = rng.uniform(2.0, 5.0)
            phase = rng.uniform(0, 2 * np.pi)
            angle = rng.uniform(0.6, 1.0)
            field = _texture_field(TEXTURE_KINDS[cls], h, w, freq, phase, angle)
            lo, hi = self._palette[cls], self._palette[(cls + 1) % len(self._palette)]
            img = lo.reshape(3, 1, 1) + (hi - lo).reshape(3, 1, 1) * (field + 1) / 2
            img += rng.normal(0, spec.noise_level, size=img.shape)
            return np.clip(img, 0, 1).astype(np.float32), int(cls)

        img = self._background(rng, h, w)

        if spec.kind == "shape-class":
            r = rng.uniform(0.12, 0.32) * min(h, w)
            cy = rng.uniform(0.25, 0.75) * h
            cx = rng.uniform(0.25, 0.75) * w
            mask = _shape_mask(SHAPE_KINDS[cls], h, w, cy, cx, r)
            self._paint(img, mask, self._palette[cls] * rng.uniform(0.8, 1.0))
            img += rng.normal(0, spec.noise_level, size=img.shape)
            return np.clip(img, 0, 1).astype(np.float32), int(cls)

        if spec.kind == "shape-seg":
            labels = np.zeros((h, w), dtype=np.int64)
            # optional second shape first, so the primary wins overlaps
            if rng.random() < 0.5:
                other = int(rng.integers(1, spec.num_classes))
                r2 = rng.uniform(0.12, 0.20) * min(h, w)
                m2 = _shape_mask(
                    SHAPE_KINDS[other - 1],
                    h,
                    w,
                    rng.uniform(0.2, 0.8) * h,
                    rng.uniform(0.2, 0.8) * w,
                    r2,
                )
                labels[m2] = other
                self._paint(img, m2, self._palette[other - 1] * rng.uniform(0.8, 1.0))
            r = rng.uniform(0.25, 0.33) * min(h, w)
            cy = rng.uniform(0.35, 0.65) * h
            cx = rng.uniform(0.35, 0.65) * w
            mask = _shape_mask(SHAPE_KINDS[cls - 1], h, w, cy, cx, r)
            labels[mask] = cls
            self._paint(img, mask, self._palette[cls - 1] * rng.uniform(0.8, 1.0))
            img += rng.normal(0, spec.noise_level, size=img.shape)
            return np.clip(img, 0, 1).astype(np.float32), labels

        raise ValueError(f"unknown generator kind '{spec.kind}'")

    def batch(self, indices) -> tuple[torch.Tensor, torch.Tensor]:
        """Stack the given samples into (float images, long labels) tensors."""
        images, labels = zip(*(self[int(i)] for i in indices))
        x = torch.from_numpy(np.stack(images))
        y = torch.from_numpy(np.asarray(labels, dtype=np.int64))
        return x, y

    # -- optional on-disk cache -------------------------------------------

    def save_cache(self, path: str | Path) -> Path:
        """Materialize every sample into one compressed indexed archive."""
        images, labels = zip(*(self[i] for i in range(self.size)))
        path = Path(path)
        np.savez_compressed(
            path, images=np.stack(images), labels=np.asarray(labels), seed=self.seed
        )
        return path if path.suffix == ".npz" else path.with_suffix(path.suffix + ".npz")

    @staticmethod
    def load_cache(path: str | Path) -> tuple[np.ndarray, np.ndarray]:
        with np.load(Path(path)) as data:
            return data["images"], data["labels"]


def make_synthetic_source(
    spec: SyntheticGeneratorSpec, size: int, seed: int, source_id: str = ""
) -> SyntheticSource:
    return SyntheticSource(spec, size, seed, source_id=source_id)


def source_from_spec(src: SourceSpec) -> SyntheticSource:
    return SyntheticSource(src.generator, src.size, src.seed, source_id=src.source_id)


# ---------------------------------------------------------------------------
# Task heads and losses
# ---------------------------------------------------------------------------


class ClassificationHead(nn.Module):
    """Global average pool + linear logits."""

    def __init__(self, in_channels: int, num_classes: int):
        super().__init__()
        self.fc = nn.Linear(in_channels, num_classes)

    def forward(self, feat: torch.Tensor) -> torch.Tensor:
        return self.fc(feat.mean(dim=(2, 3)))


class SegmentationHead(nn.Module):
    """1x1 conv to class logits, bilinearly upsampled to the label size."""

    def __init__(self, in_channels: int, num_classes: int, output_size: tuple[int, int]):
        super().__init__()
        self.conv = nn.Conv2d(in_channels, num_classes, 1)
        self.output_size = tuple(output_size)

    def forward(self, feat: torch.Tensor) -> torch.Tensor:
        logits = self.conv(feat)
        return F.interpolate(logits, size=self.output_size, mode="bilinear", align_corners=False)


def build_head(task: TaskSpec, in_channels: int, image_size: tuple[int, int]) -> nn.Module:
    if task.head.kind == "classification":
        return ClassificationHead(in_channels, task.head.num_classes)
    if task.head.kind == "segmentation":
        return SegmentationHead(in_channels, task.head.num_classes, image_size)
    raise ValueError(f"unknown head kind '{task.head.kind}'")


def task_loss(task: TaskSpec, predictions: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Cross-entropy for the task: mean over the batch, and over pixels for
    dense labels. Strictly positive unless the prediction is a delta on the
    label."""
    num_classes = task.head.num_classes
    if labels.numel() and (labels.min() < 0 or labels.max() >= num_classes):
        raise ValueError(
            f"label out of range for task '{task.task_id}': "
            f"[{int(labels.min())}, {int(labels.max())}] vs {num_classes} classes"
        )
    if task.loss_kind == "multiclass-ce":
        return F.cross_entropy(predictions, labels)
    if task.loss_kind == "per-pixel-ce":
        return F.cross_entropy(predictions, labels)
    raise ValueError(f"unknown loss kind '{task.loss_kind}'")
