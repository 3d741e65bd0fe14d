"""Dataset ingestion: IDX and CIFAR binary readers, splitting, synthesis.

Images always come out as float32 NHWC scaled to [0, 1]; labels as int64
vectors. Readers validate magic numbers and exact byte counts and raise
FormatError naming the offending field, never a bare struct error.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass

import numpy as np

from .errors import FormatError, SplitSizeError

_IDX_IMAGE_MAGIC = 0x00000803
_IDX_LABEL_MAGIC = 0x00000801

_CIFAR10_TRAIN = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
_CIFAR10_TEST = ("test_batch.bin",)
_CIFAR100_TRAIN = ("train.bin",)
_CIFAR100_TEST = ("test.bin",)


@dataclass
class Split:
    images: np.ndarray  # [N, H, W, C] float32 in [0, 1]
    labels: np.ndarray  # [N] int64

    def __len__(self) -> int:
        return len(self.images)


@dataclass
class Dataset:
    name: str
    num_classes: int
    train: Split
    val: Split
    test: Split

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.train.images.shape[1:])


def _read_file(path: str, what: str) -> bytes:
    try:
        with open(path, "rb") as fh:
            return fh.read()
    except OSError as exc:
        raise FormatError(f"{what}: cannot read {path}: {exc}") from exc


def load_idx(images_path: str, labels_path: str) -> tuple[np.ndarray, np.ndarray]:
    """Read a big-endian IDX image/label file pair.

    Returns (images [N, rows, cols, 1] float32 in [0, 1], labels [N] int64).
    """
    blob = _read_file(images_path, "idx images")
    if len(blob) < 16:
        raise FormatError(f"{images_path}: header truncated at {len(blob)} bytes")
    magic, count, rows, cols = struct.unpack(">iiii", blob[:16])
    if magic != _IDX_IMAGE_MAGIC:
        raise FormatError(
            f"{images_path}: image magic {magic:#010x}, want {_IDX_IMAGE_MAGIC:#010x}"
        )
    want = 16 + count * rows * cols
    if len(blob) != want:
        raise FormatError(
            f"{images_path}: {len(blob)} bytes but header promises {want}"
        )
    images = np.frombuffer(blob, dtype=np.uint8, offset=16).reshape(count, rows, cols)

    lblob = _read_file(labels_path, "idx labels")
    if len(lblob) < 8:
        raise FormatError(f"{labels_path}: header truncated at {len(lblob)} bytes")
    lmagic, lcount = struct.unpack(">ii", lblob[:8])
    if lmagic != _IDX_LABEL_MAGIC:
        raise FormatError(
            f"{labels_path}: label magic {lmagic:#010x}, want {_IDX_LABEL_MAGIC:#010x}"
        )
    if len(lblob) != 8 + lcount:
        raise FormatError(f"{labels_path}: {len(lblob)} bytes but header promises {8 + lcount}")
    if lcount != count:
        raise FormatError(
            f"label count {lcount} does not match image count {count}"
        )
    labels = np.frombuffer(lblob, dtype=np.uint8, offset=8).astype(np.int64)
    scaled = images.astype(np.float32) / 255.0
    return scaled[..., None], labels


def _decode_cifar(blob: bytes, path: str, coarse_byte: bool) -> tuple[np.ndarray, np.ndarray]:
    record = 3074 if coarse_byte else 3073
    if len(blob) == 0 or len(blob) % record != 0:
        raise FormatError(
            f"{path}: {len(blob)} bytes is not a positive multiple of the "
            f"{record}-byte record"
        )
    arr = np.frombuffer(blob, dtype=np.uint8).reshape(-1, record)
    labels = arr[:, 1 if coarse_byte else 0].astype(np.int64)  # fine label for CIFAR-100
    planes = arr[:, record - 3072:].reshape(-1, 3, 32, 32)
    images = planes.transpose(0, 2, 3, 1).astype(np.float32) / 255.0
    return images, labels


def _load_cifar_files(dirpath: str, names: tuple[str, ...], coarse_byte: bool):
    images, labels = [], []
    for name in names:
        path = os.path.join(dirpath, name)
        if not os.path.exists(path):
            raise FormatError(f"missing CIFAR file {path}")
        imgs, labs = _decode_cifar(_read_file(path, "cifar batch"), path, coarse_byte)
        images.append(imgs)
        labels.append(labs)
    return np.concatenate(images), np.concatenate(labels)


def load_cifar(dirpath: str, variant: str = "cifar10") -> tuple[np.ndarray, np.ndarray]:
    """Read the training pool of a CIFAR binary directory.

    variant "cifar10" reads data_batch_1..5.bin (3073-byte records);
    "cifar100" reads train.bin (3074-byte records, fine labels).
    """
    if variant == "cifar10":
        return _load_cifar_files(dirpath, _CIFAR10_TRAIN, coarse_byte=False)
    if variant == "cifar100":
        return _load_cifar_files(dirpath, _CIFAR100_TRAIN, coarse_byte=True)
    raise FormatError(f"unknown CIFAR variant {variant!r}")


def load_cifar_test(dirpath: str, variant: str = "cifar10") -> tuple[np.ndarray, np.ndarray]:
    if variant == "cifar10":
        return _load_cifar_files(dirpath, _CIFAR10_TEST, coarse_byte=False)
    if variant == "cifar100":
        return _load_cifar_files(dirpath, _CIFAR100_TEST, coarse_byte=True)
    raise FormatError(f"unknown CIFAR variant {variant!r}")


def split(
    images: np.ndarray,
    labels: np.ndarray,
    sizes: tuple[int, int, int],
    seed: int,
    test: tuple[np.ndarray, np.ndarray] | None = None,
    name: str = "",
    num_classes: int | None = None,
) -> Dataset:
    """Carve train/val/test splits from a pool by seeded permutation.

    sizes is (train, val, test) and must fit inside the pool; the splits are
    contiguous slices of one permutation, so the validation examples come
    after the training examples in permuted order. When a canonical `test`
    pair is given, sizes[2] selects a seeded subset of it (0 = all of it)
    instead of carving test examples from the pool.
    """
    if len(images) != len(labels):
        raise SplitSizeError(f"{len(images)} images but {len(labels)} labels")
    train_n, val_n, test_n = sizes
    if min(sizes) < 0:
        raise SplitSizeError(f"split sizes must be non-negative, got {sizes}")
    carve_test = 0 if test is not None else test_n
    if train_n + val_n + carve_test > len(images):
        raise SplitSizeError(
            f"sizes {sizes} need {train_n + val_n + carve_test} examples, pool has "
            f"{len(images)}"
        )
    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(images))
    order_images = images[perm]
    order_labels = labels[perm]
    train = Split(order_images[:train_n].copy(), order_labels[:train_n].copy())
    val = Split(
        order_images[train_n:train_n + val_n].copy(),
        order_labels[train_n:train_n + val_n].copy(),
    )
    if test is not None:
        test_images, test_labels = test
        if len(test_images) != len(test_labels):
            raise SplitSizeError(
                f"{len(test_images)} test images but {len(test_labels)} labels"
            )
        if test_n and test_n > len(test_images):
            raise SplitSizeError(
                f"test size {test_n} exceeds canonical test pool {len(test_images)}"
            )
        if test_n and test_n < len(test_images):
            tperm = rng.permutation(len(test_images))[:test_n]
            test_split = Split(test_images[tperm].copy(), test_labels[tperm].copy())
        else:
            test_split = Split(np.asarray(test_images).copy(), np.asarray(test_labels).copy())
    else:
        lo = train_n + val_n
        test_split = Split(
            order_images[lo:lo + test_n].copy(), order_labels[lo:lo + test_n].copy()
        )
    if num_classes is None:
        parts = [p.labels for p in (train, val, test_split) if len(p.labels)]
        num_classes = int(max(p.max() for p in parts)) + 1 if parts else 0
    return Dataset(name=name, num_classes=num_classes, train=train, val=val, test=test_split)


@dataclass(frozen=True)
class SynthSpec:
    """Shape and hardness of a generated classification dataset.

    difficulty 0 makes every example of a class identical (a linearly
    separable problem); larger values add class-preserving jitter: pixel
    noise and random integer shifts, both scaled by difficulty.
    val_per_class/test_per_class default to n_per_class // 4 (at least 1).
    """

    num_classes: int
    height: int
    width: int
    channels: int
    n_per_class: int
    difficulty: float = 0.0
    val_per_class: int | None = None
    test_per_class: int | None = None

    def per_split(self) -> tuple[int, int, int]:
        default = max(1, self.n_per_class // 4)
        val_n = default if self.val_per_class is None else self.val_per_class
        test_n = default if self.test_per_class is None else self.test_per_class
        return self.n_per_class, val_n, test_n


def _class_patterns(spec: SynthSpec, rng: np.random.Generator) -> np.ndarray:
    """Low-frequency per-class, per-channel sinusoid fields in [-1, 1]."""
    yy = np.arange(spec.height)[:, None] / spec.height
    xx = np.arange(spec.width)[None, :] / spec.width
    patterns = np.empty(
        (spec.num_classes, spec.height, spec.width, spec.channels), dtype=np.float64
    )
    for c in range(spec.num_classes):
        for ch in range(spec.channels):
            fy, fx = rng.integers(1, 4, size=2)
            py, px = rng.random(2)
            patterns[c, :, :, ch] = np.sin(2 * np.pi * (fy * yy + py)) * np.sin(
                2 * np.pi * (fx * xx + px)
            )
    return patterns


def _synth_split(
    spec: SynthSpec, patterns: np.ndarray, per_class: int, rng: np.random.Generator
) -> Split:
    shift_r = int(round(3 * spec.difficulty))
    images = np.empty(
        (spec.num_classes * per_class, spec.height, spec.width, spec.channels),
        dtype=np.float32,
    )
    labels = np.empty(spec.num_classes * per_class, dtype=np.int64)
    row = 0
    for c in range(spec.num_classes):
        base = (c + 0.5) / spec.num_classes + 0.18 * patterns[c]
        for _ in range(per_class):
            img = base
            if spec.difficulty > 0:
                if shift_r > 0:
                    sy, sx = rng.integers(-shift_r, shift_r + 1, size=2)
                    img = np.roll(img, (int(sy), int(sx)), axis=(0, 1))
                img = img + rng.normal(0.0, 0.16 * spec.difficulty, size=img.shape)
            images[row] = np.clip(img, 0.0, 1.0)
            labels[row] = c
            row += 1
    return Split(images=images, labels=labels)


def synth_dataset(spec: SynthSpec, seed: int) -> Dataset:
    """Deterministic synthetic dataset with exactly balanced classes.

    Each class is a distinct base intensity plus a class-specific sinusoid
    pattern; difficulty adds noise and shifts (see SynthSpec). The same
    (spec, seed) pair always produces bit-identical arrays.
    """
    if spec.num_classes < 2 or spec.n_per_class < 1:
        raise SplitSizeError(
            f"need at least 2 classes and 1 example per class, got "
            f"{spec.num_classes} and {spec.n_per_class}"
        )
    root = np.random.SeedSequence(seed)
    pat_ss, train_ss, val_ss, test_ss = root.spawn(4)
    patterns = _class_patterns(spec, np.random.default_rng(pat_ss))
    train_n, val_n, test_n = spec.per_split()
    return Dataset(
        name="synth",
        num_classes=spec.num_classes,
        train=_synth_split(spec, patterns, train_n, np.random.default_rng(train_ss)),
        val=_synth_split(spec, patterns, val_n, np.random.default_rng(val_ss)),
        test=_synth_split(spec, patterns, test_n, np.random.default_rng(test_ss)),
    )
