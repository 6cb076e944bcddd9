"""Dataset loading, synthetic corpus generation and batch streaming.

Images are kept as float32 arrays of shape (N, C, H, W) with pixel values
in [0, 1]; labels are int64 class indices.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Iterator, Optional, Sequence, Tuple

import numpy as np

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801

SYNTH_CLASSES = ("bar", "cross", "box", "disk", "tri", "ring", "dots", "stripes")


class IdxFormatError(ValueError):
    """Raised for malformed IDX files (bad magic, truncation, count mismatch)."""


@dataclass
class Dataset:
    images: np.ndarray          # (N, C, H, W) float32 in [0, 1]
    labels: np.ndarray          # (N,) int64
    num_classes: int
    split: str = "train"
    provenance: str = ""
    class_names: Optional[Tuple[str, ...]] = None

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise ValueError(f"images must be (N, C, H, W), got shape {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise ValueError(f"{len(self.images)} images but {len(self.labels)} labels")
        if self.images.size and (self.images.min() < 0.0 or self.images.max() > 1.0):
            raise ValueError("pixel values outside [0, 1]")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError("label outside [0, num_classes)")
        if self.class_names is None:
            self.class_names = tuple(f"class{i}" for i in range(self.num_classes))
        elif len(self.class_names) != self.num_classes:
            raise ValueError("class_names length must equal num_classes")

    def __len__(self) -> int:
        return len(self.images)

    @property
    def image_shape(self) -> Tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def subset(self, indices: np.ndarray) -> "Dataset":
        return Dataset(self.images[indices], self.labels[indices], self.num_classes,
                       split=self.split, provenance=self.provenance + "[subset]",
                       class_names=self.class_names)


def _read_be_u32(buf: bytes, offset: int, path: str) -> int:
    if offset + 4 > len(buf):
        raise IdxFormatError(f"{path}: truncated header")
    return struct.unpack_from(">I", buf, offset)[0]


def load_idx(images_path, labels_path, split: str = "train",
             class_names: Optional[Sequence[str]] = None) -> Dataset:
    """Load an image/label pair of big-endian IDX files (MNIST container format)."""
    with open(images_path, "rb") as f:
        raw = f.read()
    magic = _read_be_u32(raw, 0, str(images_path))
    if magic != IDX_IMAGE_MAGIC:
        raise IdxFormatError(f"{images_path}: bad image magic 0x{magic:08x}")
    n = _read_be_u32(raw, 4, str(images_path))
    h = _read_be_u32(raw, 8, str(images_path))
    w = _read_be_u32(raw, 12, str(images_path))
    if len(raw) != 16 + n * h * w:
        raise IdxFormatError(f"{images_path}: expected {16 + n * h * w} bytes, got {len(raw)}")
    pixels = np.frombuffer(raw, dtype=np.uint8, offset=16).reshape(n, 1, h, w)

    with open(labels_path, "rb") as f:
        raw_l = f.read()
    magic_l = _read_be_u32(raw_l, 0, str(labels_path))
    if magic_l != IDX_LABEL_MAGIC:
        raise IdxFormatError(f"{labels_path}: bad label magic 0x{magic_l:08x}")
    n_l = _read_be_u32(raw_l, 4, str(labels_path))
    if len(raw_l) != 8 + n_l:
        raise IdxFormatError(f"{labels_path}: expected {8 + n_l} bytes, got {len(raw_l)}")
    if n_l != n:
        raise IdxFormatError(f"image count {n} != label count {n_l}")
    labels = np.frombuffer(raw_l, dtype=np.uint8, offset=8).astype(np.int64)

    num_classes = int(labels.max()) + 1 if n else 1
    if class_names is not None:
        num_classes = len(class_names)
    return Dataset(pixels.astype(np.float32) / 255.0, labels, num_classes,
                   split=split, provenance=f"idx:{images_path}",
                   class_names=tuple(class_names) if class_names else None)


def save_idx(dataset: Dataset, images_path, labels_path) -> None:
    """Write a grayscale dataset as an IDX pair; pixels are quantized to uint8."""
    n, c, h, w = dataset.images.shape
    if c != 1:
        raise ValueError("IDX export supports single-channel images only")
    quantized = np.rint(dataset.images * 255.0).clip(0, 255).astype(np.uint8)
    with open(images_path, "wb") as f:
        f.write(struct.pack(">IIII", IDX_IMAGE_MAGIC, n, h, w))
        f.write(quantized.tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">II", IDX_LABEL_MAGIC, n))
        f.write(dataset.labels.astype(np.uint8).tobytes())


def load_manifest(manifest_path, split: str = "train") -> Dataset:
    """Load a dataset described by a line-oriented manifest: `class_name<TAB>path`.

    Each referenced path is a .npy file of samples for that class, either
    (n, H, W) or (n, C, H, W), with pixel values in [0, 1] or [0, 255].
    """
    names, chunks = [], []
    with open(manifest_path) as f:
        for lineno, line in enumerate(f, 1):
            line = line.rstrip("\n")
            if not line or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise ValueError(f"{manifest_path}:{lineno}: expected class_name<TAB>path")
            names.append(parts[0])
            chunks.append(np.load(parts[1]))
    if not chunks:
        raise ValueError(f"{manifest_path}: no entries")
    images, labels = [], []
    for cls, arr in enumerate(chunks):
        arr = np.asarray(arr, dtype=np.float32)
        if arr.ndim == 3:
            arr = arr[:, None]
        if arr.max() > 1.0:
            arr = arr / 255.0
        images.append(arr)
        labels.append(np.full(len(arr), cls, dtype=np.int64))
    return Dataset(np.concatenate(images), np.concatenate(labels), len(names),
                   split=split, provenance=f"manifest:{manifest_path}",
                   class_names=tuple(names))


# ---------------------------------------------------------------------------
# Synthetic shapes corpus (offline, deterministic)
# ---------------------------------------------------------------------------

def _render_shape(kind: str, rng: np.random.Generator, size: int = 28,
                  supersample: int = 3, noise: float = 0.10) -> np.ndarray:
    """Render one anti-aliased 28x28 shape with jittered pose and pixel noise.

    Pose, thickness and contrast ranges deliberately overlap between classes
    (a thin cross resembles a bar, a small box resembles a ring) so a
    classifier has to work for the last few accuracy points rather than
    saturating immediately.
    """
    s = size * supersample
    # pixel-center coordinates in original-image units
    coords = (np.arange(s) + 0.5) / supersample
    yy, xx = np.meshgrid(coords, coords, indexing="ij")

    cx = size / 2 + rng.uniform(-3.5, 3.5)
    cy = size / 2 + rng.uniform(-3.5, 3.5)
    scale = rng.uniform(0.7, 1.05)
    theta = rng.uniform(0.0, np.pi)
    ct, st = np.cos(theta), np.sin(theta)
    u = ct * (xx - cx) + st * (yy - cy)
    v = -st * (xx - cx) + ct * (yy - cy)

    if kind == "bar":
        mask = (np.abs(u) <= 9.0 * scale) & (np.abs(v) <= rng.uniform(1.2, 2.4) * scale)
    elif kind == "cross":
        arm_l, arm_w = 8.0 * scale, rng.uniform(1.1, 2.2) * scale
        mask = ((np.abs(u) <= arm_l) & (np.abs(v) <= arm_w)) | \
               ((np.abs(v) <= arm_l) & (np.abs(u) <= arm_w))
    elif kind == "box":
        r, t = 7.0 * scale, rng.uniform(1.4, 2.6) * scale
        outer = np.maximum(np.abs(u), np.abs(v))
        mask = (outer <= r) & (outer >= r - t)
    elif kind == "disk":
        mask = (u ** 2 + v ** 2) <= (6.0 * scale) ** 2
    elif kind == "tri":
        top, base = 6.5 * scale, 4.5 * scale
        mask = (v >= -base) & (v <= top) & (np.abs(u) <= 0.5 * (top - v))
    elif kind == "ring":
        rad = np.sqrt(u ** 2 + v ** 2)
        outer_r = 6.3 * scale
        mask = (rad <= outer_r) & (rad >= outer_r - rng.uniform(1.5, 2.5) * scale)
    elif kind == "dots":
        r_dot = rng.uniform(1.6, 2.2) * scale
        mask = np.zeros_like(u, dtype=bool)
        for du, dv in ((0.0, 5.2), (-4.5, -2.6), (4.5, -2.6)):
            mask |= ((u - du * scale) ** 2 + (v - dv * scale) ** 2) <= r_dot ** 2
    elif kind == "stripes":
        half_w = rng.uniform(1.1, 1.9) * scale
        mask = (np.abs(u) <= 8.0 * scale) & \
               ((np.abs(v - 3.2 * scale) <= half_w) | (np.abs(v + 3.2 * scale) <= half_w))
    else:
        raise ValueError(f"unknown shape kind {kind!r}")

    img = mask.astype(np.float32).reshape(size, supersample, size, supersample).mean(axis=(1, 3))
    img *= rng.uniform(0.6, 1.0)
    if noise > 0:
        img = img + rng.normal(0.0, noise, size=img.shape)
    return img.clip(0.0, 1.0).astype(np.float32)


def synth_shapes(n_per_class: int, classes: Sequence[str] = SYNTH_CLASSES,
                 seed: int = 0, split: str = "train", noise: float = 0.10) -> Dataset:
    """Deterministic 28x28 grayscale corpus of simple shapes, balanced classes."""
    if n_per_class < 1:
        raise ValueError("n_per_class must be >= 1")
    rng = np.random.default_rng(seed)
    images = np.empty((n_per_class * len(classes), 1, 28, 28), dtype=np.float32)
    labels = np.empty(len(images), dtype=np.int64)
    i = 0
    for cls, kind in enumerate(classes):
        for _ in range(n_per_class):
            images[i, 0] = _render_shape(kind, rng, noise=noise)
            labels[i] = cls
            i += 1
    return Dataset(images, labels, len(classes), split=split,
                   provenance=f"synth_shapes(seed={seed})", class_names=tuple(classes))


# ---------------------------------------------------------------------------
# Preprocessing / batch stream
# ---------------------------------------------------------------------------

@dataclass
class AugmentConfig:
    """Optional preprocessing: pad-and-random-crop, horizontal flip, mean/std normalize."""
    pad_crop: Optional[int] = None      # zero-pad by this much, crop back to original size
    flip: bool = False
    normalize: Optional[Tuple[float, float]] = None   # (mean, std), applied last

    def validate(self, image_shape: Tuple[int, int, int]) -> None:
        if self.pad_crop is not None:
            if self.pad_crop < 1:
                raise ValueError("pad_crop must be >= 1")
            if self.pad_crop >= min(image_shape[1], image_shape[2]):
                raise ValueError(f"pad_crop {self.pad_crop} too large for image {image_shape[1:]}")
        if self.normalize is not None and self.normalize[1] <= 0:
            raise ValueError("normalize std must be positive")


class BatchStream:
    """Seeded, replayable mini-batch stream over a dataset.

    Batch order and augmentation draws for epoch k are fully determined by
    (seed, k), so identical configurations replay identical streams.
    """

    def __init__(self, dataset: Dataset, batch_size: int = 64,
                 augment: Optional[AugmentConfig] = None, seed: int = 0):
        if batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if augment is not None:
            augment.validate(dataset.image_shape)
        self.dataset = dataset
        self.batch_size = batch_size
        self.augment = augment
        self.seed = seed

    def batches_per_epoch(self) -> int:
        return (len(self.dataset) + self.batch_size - 1) // self.batch_size

    def epoch(self, epoch_index: int = 0) -> Iterator[Tuple[np.ndarray, np.ndarray]]:
        rng = np.random.default_rng([self.seed, epoch_index])
        order = rng.permutation(len(self.dataset))
        for start in range(0, len(order), self.batch_size):
            idx = order[start:start + self.batch_size]
            x = self.dataset.images[idx]
            y = self.dataset.labels[idx]
            if self.augment is not None:
                x = self._apply_augment(x, rng)
            yield x, y

    def _apply_augment(self, x: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        aug = self.augment
        if aug.pad_crop is not None:
            p = aug.pad_crop
            n, c, h, w = x.shape
            padded = np.zeros((n, c, h + 2 * p, w + 2 * p), dtype=x.dtype)
            padded[:, :, p:p + h, p:p + w] = x
            out = np.empty_like(x)
            offs = rng.integers(0, 2 * p + 1, size=(n, 2))
            for i in range(n):
                oy, ox = offs[i]
                out[i] = padded[i, :, oy:oy + h, ox:ox + w]
            x = out
        else:
            x = x.copy()
        if aug.flip:
            do = rng.random(len(x)) < 0.5
            x[do] = x[do, :, :, ::-1]
        if aug.normalize is not None:
            mean, std = aug.normalize
            x = (x - mean) / std
        return x


def preprocess(dataset: Dataset, config: Optional[AugmentConfig] = None,
               seed: int = 0, batch_size: int = 64) -> BatchStream:
    """Build the seeded batch stream used by training."""
    return BatchStream(dataset, batch_size=batch_size, augment=config, seed=seed)
