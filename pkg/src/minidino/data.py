"""Dataset sources: image folders, CIFAR binary batches, synthetic blobs.

Every source yields ImageRecords (H x W x 3 float pixels in [0, 1], optional
integer label, stable string id) in an order that is deterministic for a
fixed seed, so training runs are reproducible end to end.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import cv2
import numpy as np

from .augment import AugmentConfig, CropSet, generate_crops, record_rng

CIFAR_RECORD_BYTES = 3073  # 1 label byte + 32*32*3 pixel bytes, CHW row-major

_IMAGE_EXTENSIONS = {".png", ".ppm", ".pgm", ".bmp", ".jpg", ".jpeg"}


class DataError(Exception):
    """Fatal dataset problem (malformed file, empty dataset, bad source)."""


@dataclass
class ImageRecord:
    pixels: np.ndarray  # H x W x 3 float32 in [0, 1]
    label: int | None
    id: str

    def validate(self) -> None:
        h, w = self.pixels.shape[:2]
        if h < 8 or w < 8:
            raise DataError(f"record {self.id}: image {h}x{w} below the 8x8 minimum")
        if self.pixels.min() < 0.0 or self.pixels.max() > 1.0:
            raise DataError(f"record {self.id}: pixel values outside [0, 1]")


@dataclass
class LoadError:
    id: str
    message: str


@dataclass(frozen=True)
class DatasetSource:
    kind: str  # image-folder | cifar-binary | synthetic-blobs
    root: str  # path, or the generator seed for synthetic-blobs
    class_count: int = 3
    n: int = 300  # synthetic-blobs only
    noise: float = 0.04  # synthetic-blobs only
    image_size: int = 64  # synthetic-blobs only


def load_dataset(source: DatasetSource) -> tuple[list[ImageRecord], list[LoadError]]:
    """Materialize a source. Per-record failures are returned, not raised."""
    if source.kind == "synthetic-blobs":
        return _load_blobs(source), []
    if source.kind == "cifar-binary":
        return _load_cifar(source.root), []
    if source.kind == "image-folder":
        return _load_folder(source.root)
    raise DataError(f"unknown dataset kind: {source.kind!r}")


# Synthetic blobs ---------------------------------------------------------
#
# The class id is encoded by the SHAPE of a single saturated figure (disk,
# ring, cross, then squares beyond 3 classes); its color, size and position
# are random and independent of the class, and the background carries a
# random gray level, gradient and tint. Color statistics carry no label
# information at all, so the shape is the only signal shared across crops of
# one image.


def _load_blobs(source: DatasetSource) -> list[ImageRecord]:
    try:
        seed = int(source.root)
    except ValueError:
        raise DataError(f"synthetic-blobs root must be an integer seed, got {source.root!r}") from None
    records = []
    for i in range(source.n):
        cls = i % source.class_count
        records.append(_make_blob(seed, i, cls, source))
    return records


def _shape_mask(cls: int, xx, yy, cx, cy, radius):
    """Soft [0,1] mask for the class shape, centered at (cx, cy)."""
    dx = xx - cx
    dy = yy - cy
    dist = np.sqrt(dx * dx + dy * dy)
    kind = cls % 4
    if kind == 0:  # disk
        return np.clip(1.5 - dist / radius, 0.0, 1.0) ** 2
    if kind == 1:  # ring
        band = radius / 3.0
        return np.clip(1.5 - np.abs(dist - radius) / band, 0.0, 1.0) ** 2
    if kind == 2:  # cross
        w = radius / 2.2
        arm_h = np.clip(1.5 - np.abs(dy) / w, 0, 1) * np.clip(1.5 - np.abs(dx) / (1.3 * radius), 0, 1)
        arm_v = np.clip(1.5 - np.abs(dx) / w, 0, 1) * np.clip(1.5 - np.abs(dy) / (1.3 * radius), 0, 1)
        return np.maximum(arm_h, arm_v) ** 2
    # square outline
    edge = np.maximum(np.abs(dx), np.abs(dy))
    band = radius / 3.0
    return np.clip(1.5 - np.abs(edge - radius) / band, 0.0, 1.0) ** 2


def _make_blob(seed: int, index: int, cls: int, source: DatasetSource) -> ImageRecord:
    rng = np.random.default_rng([seed, index])
    s = source.image_size
    yy, xx = np.mgrid[0:s, 0:s].astype(np.float32) / s

    base = rng.uniform(0.30, 0.55)
    theta = rng.uniform(0, 2 * np.pi)
    amp = rng.uniform(0.0, 0.25)
    gradient = amp * ((xx - 0.5) * np.cos(theta) + (yy - 0.5) * np.sin(theta))
    img = np.empty((s, s, 3), dtype=np.float32)
    for c in range(3):
        img[..., c] = base + gradient + rng.uniform(-0.08, 0.08)

    # Figure color/placement are class-independent nuisance.
    hue = rng.uniform(0.0, 1.0)
    color = _hue_to_rgb(hue)
    cx = np.clip(rng.normal(0.5, 0.14), 0.25, 0.75)
    cy = np.clip(rng.normal(0.5, 0.14), 0.25, 0.75)
    radius = rng.uniform(0.18, 0.26)
    mask = _shape_mask(cls, xx, yy, cx, cy, radius)
    alpha = (rng.uniform(0.85, 1.0) * mask)[..., None]
    img = img * (1.0 - alpha) + color[None, None, :] * alpha

    img += rng.normal(0.0, source.noise, size=img.shape).astype(np.float32)
    img = np.clip(img, 0.0, 1.0).astype(np.float32)
    return ImageRecord(pixels=img, label=cls, id=f"blob-{seed}-{index:05d}")


def _hue_to_rgb(h: float) -> np.ndarray:
    """Fully saturated RGB for a hue in [0, 1)."""
    i = int(h * 6.0) % 6
    f = h * 6.0 - int(h * 6.0)
    q, t = 1.0 - f, f
    table = [(1, t, 0), (q, 1, 0), (0, 1, t), (0, q, 1), (t, 0, 1), (1, 0, q)]
    return np.array(table[i], dtype=np.float32)


# CIFAR binary batches ------------------------------------------------------


def _load_cifar(path: str) -> list[ImageRecord]:
    if not os.path.isfile(path):
        raise DataError(f"cifar-binary file not found: {path}")
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size == 0 or raw.size % CIFAR_RECORD_BYTES != 0:
        offset = raw.size - raw.size % CIFAR_RECORD_BYTES
        raise DataError(
            f"malformed CIFAR binary {path}: {raw.size} bytes is not a multiple of "
            f"{CIFAR_RECORD_BYTES}; trailing partial record starts at byte offset {offset}"
        )
    raw = raw.reshape(-1, CIFAR_RECORD_BYTES)
    name = os.path.basename(path)
    records = []
    for i in range(raw.shape[0]):
        label = int(raw[i, 0])
        chw = raw[i, 1:].reshape(3, 32, 32)
        pixels = np.ascontiguousarray(chw.transpose(1, 2, 0)).astype(np.float32) / 255.0
        records.append(ImageRecord(pixels=pixels, label=label, id=f"{name}:{i:05d}"))
    return records


# Image folders --------------------------------------------------------------


def _load_folder(root: str) -> tuple[list[ImageRecord], list[LoadError]]:
    if not os.path.isdir(root):
        raise DataError(f"image-folder root not found: {root}")
    classes = sorted(
        d for d in os.listdir(root) if os.path.isdir(os.path.join(root, d))
    )
    if not classes:
        raise DataError(f"image-folder {root} has no class subdirectories")
    records: list[ImageRecord] = []
    errors: list[LoadError] = []
    for label, cls in enumerate(classes):
        cdir = os.path.join(root, cls)
        for fname in sorted(os.listdir(cdir)):
            if os.path.splitext(fname)[1].lower() not in _IMAGE_EXTENSIONS:
                continue
            rec_id = f"{cls}/{fname}"
            img = cv2.imread(os.path.join(cdir, fname), cv2.IMREAD_COLOR)
            if img is None:
                errors.append(LoadError(id=rec_id, message="unreadable image file"))
                continue
            pixels = np.ascontiguousarray(img[..., ::-1]).astype(np.float32) / 255.0
            records.append(ImageRecord(pixels=pixels, label=label, id=rec_id))
    return records, errors


# Batching -------------------------------------------------------------------


def batch_iterator(
    records: list[ImageRecord],
    batch_size: int,
    cfg: AugmentConfig,
    seed: int,
    epoch: int = 0,
):
    """One epoch of augmented batches in a seed-deterministic shuffled order.

    Each record draws from its own random stream keyed on (seed, epoch,
    dataset index), so the output is independent of batching and of any
    parallel augmentation. The final partial batch is emitted.
    """
    if not records:
        raise DataError("empty dataset")
    if batch_size < 1:
        raise DataError(f"batch_size must be >= 1, got {batch_size}")
    order = np.random.default_rng([seed, epoch, 0x5E1F]).permutation(len(records))
    batch: list[CropSet] = []
    for idx in order:
        rng = record_rng(seed, epoch, int(idx))
        batch.append(generate_crops(records[int(idx)], cfg, rng))
        if len(batch) == batch_size:
            yield batch
            batch = []
    if batch:
        yield batch


def iterations_per_epoch(n_records: int, batch_size: int) -> int:
    return (n_records + batch_size - 1) // batch_size
