"""CIFAR binary ingestion, a seeded synthetic image set, stratified splits and batching."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

CIFAR10_MEAN = (0.4914, 0.4822, 0.4465)
CIFAR10_STD = (0.2470, 0.2435, 0.2616)
CIFAR100_MEAN = (0.5071, 0.4865, 0.4409)
CIFAR100_STD = (0.2673, 0.2564, 0.2762)

PIXELS = 3 * 32 * 32
LABEL_BYTES = {"c10": 1, "c100": 2}
NUM_CLASSES = {"c10": 10, "c100": 100}
TRAIN_FILES = {"c10": [f"data_batch_{i}.bin" for i in range(1, 6)], "c100": ["train.bin"]}
TEST_FILES = {"c10": ["test_batch.bin"], "c100": ["test.bin"]}


class DataFormatError(ValueError):
    pass


@dataclass
class Dataset:
    images: np.ndarray  # N x 3 x H x W, float64, standardised
    labels: np.ndarray  # N, int64
    num_classes: int
    name: str
    raw: np.ndarray | None = None  # N x 3 x H x W uint8 before normalisation
    index: np.ndarray | None = field(default=None, repr=False)  # positions in the parent set

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise ValueError(f"images must be N x C x H x W, got {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise ValueError(f"{len(self.images)} images but {len(self.labels)} labels")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def image_size(self) -> tuple[int, int]:
        return self.images.shape[2], self.images.shape[3]

    def subset(self, idx: np.ndarray, name: str | None = None) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.images[idx], self.labels[idx], self.num_classes, name or self.name,
                       None if self.raw is None else self.raw[idx], idx)

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)


# CIFAR binary format ----------------------------------------------------------

def decode_records(blob: bytes, variant: str = "c10", source: str = "<bytes>") -> tuple[np.ndarray, np.ndarray, np.ndarray | None]:
    """Split a CIFAR binary blob into (pixels uint8 N x 3 x 32 x 32, labels, coarse labels)."""
    if variant not in LABEL_BYTES:
        raise ValueError(f"unknown CIFAR variant {variant!r}; expected 'c10' or 'c100'")
    lb = LABEL_BYTES[variant]
    rec = lb + PIXELS
    if len(blob) % rec:
        whole = len(blob) - len(blob) % rec
        raise DataFormatError(
            f"{source}: expected a multiple of {rec}-byte records, got {len(blob)} bytes "
            f"(partial record at byte offset {whole}; expected length {whole} or {whole + rec})")
    arr = np.frombuffer(blob, dtype=np.uint8).reshape(-1, rec)
    coarse = arr[:, 0].astype(np.int64) if variant == "c100" else None
    labels = arr[:, lb - 1].astype(np.int64)
    if labels.size and labels.max() >= NUM_CLASSES[variant]:
        bad = int(np.argmax(labels >= NUM_CLASSES[variant]))
        raise DataFormatError(f"{source}: record {bad} (byte offset {bad * rec}) has label {labels[bad]}")
    pixels = arr[:, lb:].reshape(-1, 3, 32, 32).copy()
    return pixels, labels, coarse


def encode_records(pixels: np.ndarray, labels: Sequence[int], variant: str = "c10",
                   coarse: Sequence[int] | None = None) -> bytes:
    pixels = np.asarray(pixels)
    if pixels.dtype != np.uint8 or pixels.shape[1:] != (3, 32, 32):
        raise DataFormatError(f"CIFAR records need uint8 N x 3 x 32 x 32 pixels, got {pixels.dtype} {pixels.shape}")
    labels = np.asarray(labels, dtype=np.uint8).reshape(-1, 1)
    head = labels
    if variant == "c100":
        c = np.zeros_like(labels) if coarse is None else np.asarray(coarse, dtype=np.uint8).reshape(-1, 1)
        head = np.concatenate([c, labels], axis=1)
    return np.concatenate([head, pixels.reshape(len(pixels), -1)], axis=1).tobytes()


def standardise(raw: np.ndarray, mean=None, std=None) -> np.ndarray:
    """Scale uint8 pixels to [0, 1] then standardise per channel.

    ``mean``/``std`` of None use the statistics of ``raw`` itself.
    """
    x = raw.astype(np.float64) / 255.0
    m = x.mean(axis=(0, 2, 3)) if mean is None else np.asarray(mean, dtype=np.float64)
    s = x.std(axis=(0, 2, 3)) if std is None else np.asarray(std, dtype=np.float64)
    s = np.where(s > 0, s, 1.0)
    return (x - m[None, :, None, None]) / s[None, :, None, None]


def load_cifar(path, variant: str = "c10", split: str = "train", mean=None, std=None,
               dataset_stats: bool = False) -> Dataset:
    """Load official CIFAR-10/100 binary files from a directory or a single file.

    Uses the published channel statistics unless ``mean``/``std`` are given or
    ``dataset_stats`` asks for the statistics of the loaded pixels.
    """
    if variant not in LABEL_BYTES:
        raise ValueError(f"unknown CIFAR variant {variant!r}; expected 'c10' or 'c100'")
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"CIFAR location does not exist: {path}")
    if path.is_dir():
        names = (TRAIN_FILES if split == "train" else TEST_FILES)[variant]
        files = [path / n for n in names]
    else:
        files = [path]
    missing = [str(f) for f in files if not f.is_file()]
    if missing:
        raise FileNotFoundError(f"CIFAR file(s) not found: {', '.join(missing)}")
    parts = [decode_records(f.read_bytes(), variant, str(f)) for f in files]
    raw = np.concatenate([p[0] for p in parts])
    labels = np.concatenate([p[1] for p in parts])
    if dataset_stats:
        mean = std = None
    else:
        default_mean, default_std = (CIFAR10_MEAN, CIFAR10_STD) if variant == "c10" else (CIFAR100_MEAN, CIFAR100_STD)
        mean = default_mean if mean is None else mean
        std = default_std if std is None else std
    name = {"c10": "cifar10", "c100": "cifar100"}[variant]
    return Dataset(standardise(raw, mean, std), labels, NUM_CLASSES[variant], f"{name}-{split}", raw)


def write_cifar(ds: Dataset, path, variant: str = "c10") -> None:
    if ds.raw is None:
        raise DataFormatError("dataset has no raw pixels to export")
    Path(path).write_bytes(encode_records(ds.raw, ds.labels, variant))


# synthetic data -----------------------------------------------------------------

_PALETTE = np.array([
    [0.95, 0.15, 0.15], [0.15, 0.85, 0.20], [0.15, 0.30, 0.95], [0.95, 0.90, 0.10],
    [0.85, 0.20, 0.90], [0.10, 0.90, 0.90], [0.98, 0.55, 0.10], [0.05, 0.05, 0.05],
])
_N_PATTERNS = 6
MAX_SYNTH_CLASSES = len(_PALETTE) * _N_PATTERNS


def _class_styles(classes: int) -> list[tuple[int, int]]:
    # first 24 classes differ in both colour and pattern
    styles = [(k % len(_PALETTE), k % _N_PATTERNS) for k in range(24)]
    rest = [(c, p) for c in range(len(_PALETTE)) for p in range(_N_PATTERNS) if (c, p) not in styles]
    return (styles + rest)[:classes]


def _pattern(kind: int, size: int, rng: np.random.Generator) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    period = max(4, size // 4)
    phase = rng.integers(0, period)
    if kind == 0:  # horizontal stripes
        return ((yy + phase) % period < period / 2).astype(float)
    if kind == 1:  # vertical stripes
        return ((xx + phase) % period < period / 2).astype(float)
    if kind == 2:  # checkerboard
        return ((((yy + phase) // (period / 2)) + (xx // (period / 2))) % 2).astype(float)
    if kind == 3:  # disk
        cy, cx = size / 2 + rng.uniform(-size / 8, size / 8, 2)
        return (((yy - cy) ** 2 + (xx - cx) ** 2) < (size / 3) ** 2).astype(float)
    if kind == 4:  # square frame
        lo = int(rng.integers(1, max(2, size // 6)))
        hi = size - 1 - int(rng.integers(1, max(2, size // 6)))
        m = np.zeros((size, size))
        m[lo:hi + 1, lo:hi + 1] = 1.0
        m[lo + 2:hi - 1, lo + 2:hi - 1] = 0.0
        return m
    return ((xx + yy + phase) % period < period / 2).astype(float)  # diagonal stripes


def synth_dataset(seed: int = 0, n: int = 2000, classes: int = 4, size: int = 16, noise: float = 0.1) -> Dataset:
    """Balanced class-conditional images: a per-class colour painted in a per-class pattern."""
    if classes < 2 or classes > MAX_SYNTH_CLASSES:
        raise ValueError(f"classes must lie in [2, {MAX_SYNTH_CLASSES}], got {classes}")
    if size < 8:
        raise ValueError(f"size must be >= 8, got {size}")
    if n < classes:
        raise ValueError(f"need at least one sample per class, got n={n} for {classes} classes")
    rng = np.random.default_rng(seed)
    counts = np.full(classes, n // classes)
    counts[: n % classes] += 1
    labels = rng.permutation(np.repeat(np.arange(classes), counts))
    styles = _class_styles(classes)
    images = np.empty((n, 3, size, size))
    for i, c in enumerate(labels):
        colour_idx, kind = styles[c]
        mask = _pattern(kind, size, rng)
        background = rng.uniform(0.35, 0.65)
        colour = np.clip(_PALETTE[colour_idx] + rng.normal(0, 0.05, 3), 0, 1)
        img = background * (1 - mask)[None] + colour[:, None, None] * mask[None]
        images[i] = img + rng.normal(0, noise, img.shape)
    raw = np.round(np.clip(images, 0, 1) * 255).astype(np.uint8)
    return Dataset(standardise(raw), labels, classes, f"synth-{classes}x{size}-s{seed}", raw)


# splitting and batching -------------------------------------------------------------

@dataclass(frozen=True)
class SplitSpec:
    weight_fraction: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.weight_fraction < 1:
            raise ValueError(f"weight_fraction must lie in (0, 1), got {self.weight_fraction}")


def _content_keys(ds: Dataset, seed: int) -> list[bytes]:
    src = ds.raw if ds.raw is not None else ds.images
    salt = int(seed).to_bytes(8, "little", signed=True)
    return [hashlib.blake2b(salt + src[i].tobytes() + bytes([0]) + int(ds.labels[i]).to_bytes(4, "little"),
                            digest_size=16).digest() for i in range(len(ds))]


def split(ds: Dataset, spec: SplitSpec = SplitSpec()) -> tuple[Dataset, Dataset]:
    """Stratified disjoint split into a weight-training set and an architecture set.

    Membership is decided per class by a seeded hash of each sample's content,
    so it does not depend on the order of the input.
    """
    keys = _content_keys(ds, spec.seed)
    weight_idx, alpha_idx = [], []
    for c in range(ds.num_classes):
        members = np.flatnonzero(ds.labels == c)
        if len(members) == 0:
            continue
        if len(members) < 2:
            raise ValueError(f"class {c} has {len(members)} sample(s); a split needs at least 2")
        k = int(round(spec.weight_fraction * len(members)))
        k = min(max(k, 1), len(members) - 1)
        ranked = sorted(members, key=lambda i: (keys[i], i))
        weight_idx.extend(ranked[:k])
        alpha_idx.extend(ranked[k:])
    w, a = np.sort(np.array(weight_idx, dtype=np.int64)), np.sort(np.array(alpha_idx, dtype=np.int64))
    return ds.subset(w, f"{ds.name}/weights"), ds.subset(a, f"{ds.name}/alpha")


def augment(x: np.ndarray, rng: np.random.Generator, pad: int = 4) -> np.ndarray:
    """Random horizontal flip plus pad-and-crop."""
    n, _, h, w = x.shape
    flip = rng.random(n) < 0.5
    x = np.where(flip[:, None, None, None], x[..., ::-1], x)
    padded = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    oy = rng.integers(0, 2 * pad + 1, n)
    ox = rng.integers(0, 2 * pad + 1, n)
    return np.stack([padded[i, :, oy[i]:oy[i] + h, ox[i]:ox[i] + w] for i in range(n)])


def batches(ds: Dataset, batch_size: int, rng: np.random.Generator | None = None,
            shuffle: bool = True, use_augment: bool = False) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    order = rng.permutation(len(ds)) if shuffle and rng is not None else np.arange(len(ds))
    for start in range(0, len(ds), batch_size):
        idx = order[start:start + batch_size]
        x = ds.images[idx]
        if use_augment and rng is not None:
            x = augment(x, rng)
        yield x, ds.labels[idx]
