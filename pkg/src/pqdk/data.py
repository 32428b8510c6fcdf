"""Dataset provisioning: CIFAR-10 binary loader, synthetic gratings, batching."""
from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass

import numpy as np

CIFAR_RECORD = 3073
CIFAR_TRAIN_FILES = [f"data_batch_{i}.bin" for i in range(1, 6)]
CIFAR_TEST_FILE = "test_batch.bin"
TEMPLATE_AMPLITUDE = 4.0


class DataFormatError(ValueError):
    pass


@dataclass
class LabeledImages:
    images: np.ndarray  # uint8 [N, C, H, W]
    labels: np.ndarray  # int64 [N]
    num_classes: int

    def __post_init__(self):
        if self.images.ndim != 4 or self.images.dtype != np.uint8:
            raise DataFormatError(f"images must be uint8 [N,C,H,W], got {self.images.dtype} {self.images.shape}")
        if len(self.images) == 0 or len(self.images) != len(self.labels):
            raise DataFormatError("images and labels must be non-empty and equally long")
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise DataFormatError(f"labels outside [0, {self.num_classes})")

    def __len__(self):
        return len(self.labels)

    @property
    def image_shape(self) -> tuple:
        return tuple(self.images.shape[1:])

    def subset(self, idx) -> "LabeledImages":
        return LabeledImages(self.images[idx], self.labels[idx], self.num_classes)

    def as_float(self) -> np.ndarray:
        return self.images.astype(np.float32) / np.float32(255.0)

    def checksum(self) -> str:
        h = hashlib.sha256()
        h.update(self.images.tobytes())
        h.update(self.labels.astype("<i8").tobytes())
        return h.hexdigest()[:16]


def read_cifar10_file(path) -> LabeledImages:
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size == 0 or raw.size % CIFAR_RECORD:
        full = raw.size // CIFAR_RECORD
        raise DataFormatError(
            f"{path}: length {raw.size} is not a whole number of {CIFAR_RECORD}-byte records; "
            f"record {full} truncated at byte offset {full * CIFAR_RECORD}")
    recs = raw.reshape(-1, CIFAR_RECORD)
    labels = recs[:, 0].astype(np.int64)
    bad = np.flatnonzero(labels > 9)
    if bad.size:
        raise DataFormatError(f"{path}: label byte {labels[bad[0]]} > 9 at byte offset {bad[0] * CIFAR_RECORD}")
    images = recs[:, 1:].reshape(-1, 3, 32, 32).copy()
    return LabeledImages(images, labels, 10)


def write_cifar10_file(data: LabeledImages, path):
    recs = np.empty((len(data), CIFAR_RECORD), dtype=np.uint8)
    recs[:, 0] = data.labels
    recs[:, 1:] = data.images.reshape(len(data), -1)
    recs.tofile(path)


def _concat(parts: list[LabeledImages]) -> LabeledImages:
    return LabeledImages(np.concatenate([p.images for p in parts]),
                         np.concatenate([p.labels for p in parts]), 10)


def load_cifar10_binary(directory) -> tuple[LabeledImages, LabeledImages]:
    """Load the five training batches and the test batch in file order."""
    missing = [f for f in CIFAR_TRAIN_FILES + [CIFAR_TEST_FILE]
               if not os.path.exists(os.path.join(directory, f))]
    if missing:
        raise FileNotFoundError(f"{directory}: missing CIFAR-10 files {missing}")
    train = _concat([read_cifar10_file(os.path.join(directory, f)) for f in CIFAR_TRAIN_FILES])
    test = read_cifar10_file(os.path.join(directory, CIFAR_TEST_FILE))
    return train, test


@dataclass
class SyntheticSpec:
    num_classes: int = 10
    train_per_class: int = 100
    test_per_class: int = 50
    image_size: int = 16
    channels: int = 3
    margin: float = 1.0
    noise: float = 40.0
    seed: int = 0

    def __post_init__(self):
        if self.margin <= 0:
            raise ValueError("margin must be positive")
        if self.num_classes < 2 or self.train_per_class < 1 or self.test_per_class < 1:
            raise ValueError("need at least 2 classes and 1 sample per class per split")

    def describe(self) -> str:
        return (f"synthetic:k={self.num_classes},train={self.train_per_class},test={self.test_per_class},"
                f"size={self.image_size},c={self.channels},margin={self.margin},noise={self.noise},"
                f"seed={self.seed}")


def _class_patterns(spec: SyntheticSpec, rng: np.random.Generator):
    k = spec.num_classes
    # Orientations spread over a half turn, frequencies cycle over three bands.
    theta = np.pi * np.arange(k) / k
    freq = (1.5 + (np.arange(k) % 3)) / spec.image_size
    tint = rng.normal(0.0, 1.0, size=(k, spec.channels))
    tint /= np.linalg.norm(tint, axis=1, keepdims=True)
    chan = rng.uniform(0.5, 1.0, size=(k, spec.channels))
    # Blocky +-1 template on a 4x4 grid: the linearly separable part of the class signal.
    cells = rng.choice([-1.0, 1.0], size=(k, spec.channels, 4, 4))
    rep = -(-spec.image_size // 4)
    template = cells.repeat(rep, axis=2).repeat(rep, axis=3)[:, :, :spec.image_size, :spec.image_size]
    return theta, freq, tint, chan, template


def _render(spec, labels, theta, freq, tint, chan, template, rng):
    s = spec.image_size
    yy, xx = np.mgrid[0:s, 0:s].astype(np.float64)
    n = len(labels)
    phase = rng.uniform(0, 2 * np.pi, size=n)
    th, fr = theta[labels], freq[labels]
    arg = 2 * np.pi * fr[:, None, None] * (xx[None] * np.cos(th)[:, None, None]
                                          + yy[None] * np.sin(th)[:, None, None]) + phase[:, None, None]
    grating = np.sin(arg)[:, None] * chan[labels][:, :, None, None]
    img = (128.0 + spec.margin * (40.0 * grating + 24.0 * tint[labels][:, :, None, None]
                                  + TEMPLATE_AMPLITUDE * template[labels])
           + rng.normal(0.0, spec.noise, size=(n, spec.channels, s, s)))
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


def synth_generate(spec: SyntheticSpec) -> tuple[LabeledImages, LabeledImages]:
    """Seeded class-conditional gratings with per-class colour tint and template plus pixel noise.

    Train and test draw from separate child streams, so the splits never
    share a sample.
    """
    root = np.random.SeedSequence([spec.seed, 0x5EED])
    pat_ss, train_ss, test_ss = root.spawn(3)
    theta, freq, tint, chan, template = _class_patterns(spec, np.random.default_rng(pat_ss))
    out = []
    for ss, per in ((train_ss, spec.train_per_class), (test_ss, spec.test_per_class)):
        rng = np.random.default_rng(ss)
        labels = np.repeat(np.arange(spec.num_classes), per)
        labels = labels[rng.permutation(len(labels))]
        images = _render(spec, labels, theta, freq, tint, chan, template, rng)
        out.append(LabeledImages(images, labels.astype(np.int64), spec.num_classes))
    return out[0], out[1]


def parse_synthetic(desc: str) -> SyntheticSpec:
    """Inverse of :meth:`SyntheticSpec.describe`; bare ``synthetic`` gives defaults."""
    if desc == "synthetic":
        return SyntheticSpec()
    if not desc.startswith("synthetic:"):
        raise ValueError(f"not a synthetic data descriptor: {desc!r}")
    keys = {"k": "num_classes", "train": "train_per_class", "test": "test_per_class",
            "size": "image_size", "c": "channels", "margin": "margin", "noise": "noise", "seed": "seed"}
    kwargs = {}
    for item in desc[len("synthetic:"):].split(","):
        if not item:
            continue
        key, _, val = item.partition("=")
        if key not in keys:
            raise ValueError(f"unknown synthetic field {key!r}")
        field = keys[key]
        kwargs[field] = float(val) if field in ("margin", "noise") else int(val)
    return SyntheticSpec(**kwargs)


def load_dataset(desc: str) -> tuple[LabeledImages, LabeledImages]:
    """Resolve a data descriptor: ``synthetic[:...]`` or a CIFAR-10 binary directory."""
    if desc.startswith("synthetic"):
        return synth_generate(parse_synthetic(desc))
    return load_cifar10_binary(desc)


def epoch_permutation(n: int, seed: int, epoch: int) -> np.ndarray:
    return np.random.default_rng([seed, 0xDA7A, epoch]).permutation(n)


def batches(data: LabeledImages, batch_size: int, seed: int, epoch: int):
    """Yield ``(x, y, idx)`` batches in an order fixed by ``(seed, epoch)``.

    Pixels become float32 in [0, 1]; the last partial batch is kept.
    """
    n = len(data)
    if not 1 <= batch_size <= n:
        raise ValueError(f"batch_size must lie in [1, {n}], got {batch_size}")
    perm = epoch_permutation(n, seed, epoch)
    for start in range(0, n, batch_size):
        idx = perm[start:start + batch_size]
        yield data.images[idx].astype(np.float32) / np.float32(255.0), data.labels[idx], idx
