"""Deterministic loading, subsetting, augmentation, and batching of image datasets.

Images are stored as float32 in [0, 1], shape [N, C, H, W]; normalization is
applied when batches are produced.  Every random choice is a pure function of
(seed, epoch) for ordering and (seed, epoch, sample index, stream offset) for
augmentation, so the number of prefetch workers never changes a batch.
"""

from __future__ import annotations

import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np

from .tensor import Tensor

CIFAR_PIXELS = 3 * 32 * 32


class DataError(ValueError):
    pass


@dataclass
class Dataset:
    images: np.ndarray  # float32 [N, C, H, W] in [0, 1]
    labels: np.ndarray  # int64 [N]
    num_classes: int
    mean: Optional[np.ndarray] = None
    std: Optional[np.ndarray] = None

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.images) != len(self.labels):
            raise DataError(f"{len(self.images)} images but {len(self.labels)} labels")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise DataError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def resolution(self) -> int:
        return self.images.shape[-1]

    @property
    def channels(self) -> int:
        return self.images.shape[1]

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)

    def with_stats(self, mean=None, std=None) -> "Dataset":
        """Attach normalization statistics, computing them from the images if absent."""
        if mean is None:
            mean = self.images.mean(axis=(0, 2, 3), dtype=np.float64)
        if std is None:
            std = self.images.std(axis=(0, 2, 3), dtype=np.float64)
        return replace(self, mean=np.asarray(mean, np.float64), std=np.asarray(std, np.float64))


@dataclass
class LabeledBatch:
    images: Tensor
    labels: np.ndarray
    indices: np.ndarray

    def __len__(self) -> int:
        return len(self.labels)


@dataclass
class Augmentation:
    enabled: bool = True
    crop_padding: int = 4
    hflip: bool = True


# -- sources ----------------------------------------------------------------


def load_cifar_binary(path, num_classes: int = 10, label_bytes: Optional[int] = None) -> Dataset:
    """CIFAR-10 (1 label byte) or CIFAR-100 (coarse + fine bytes, fine used) records."""
    if label_bytes is None:
        label_bytes = 1 if num_classes <= 10 else 2
    if label_bytes not in (1, 2):
        raise DataError("label_bytes must be 1 or 2")
    record = label_bytes + CIFAR_PIXELS
    try:
        buf = Path(path).read_bytes()
    except OSError as e:
        raise DataError(f"cannot read {path}: {e}") from None
    if len(buf) == 0 or len(buf) % record:
        raise DataError(f"{path}: length {len(buf)} is not a multiple of the {record}-byte record")
    raw = np.frombuffer(buf, dtype=np.uint8).reshape(-1, record)
    labels = raw[:, label_bytes - 1].astype(np.int64)
    if labels.max() >= num_classes:
        raise DataError(f"{path}: label {labels.max()} out of range for {num_classes} classes")
    images = raw[:, label_bytes:].reshape(-1, 3, 32, 32).astype(np.float32) / 255.0
    return Dataset(images, labels, num_classes)


def read_idx(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    if len(buf) < 4 or buf[0] != 0 or buf[1] != 0 or buf[2] != 0x08:
        raise DataError(f"{path}: not an unsigned-byte IDX file")
    ndim = buf[3]
    dims = struct.unpack_from(f">{ndim}I", buf, 4)
    data = np.frombuffer(buf, dtype=np.uint8, offset=4 + 4 * ndim)
    if data.size != int(np.prod(dims)):
        raise DataError(f"{path}: expected {int(np.prod(dims))} values, found {data.size}")
    return data.reshape(dims)


def write_idx(path, array: np.ndarray) -> None:
    array = np.asarray(array, dtype=np.uint8)
    header = bytes([0, 0, 0x08, array.ndim]) + struct.pack(f">{array.ndim}I", *array.shape)
    Path(path).write_bytes(header + array.tobytes())


def load_idx(images_path, labels_path, num_classes: int) -> Dataset:
    """MNIST-style pair: images [N, H, W] (or [N, C, H, W]) and labels [N]."""
    images = read_idx(images_path)
    labels = read_idx(labels_path)
    if labels.ndim != 1:
        raise DataError(f"{labels_path}: labels must be 1-d")
    if images.ndim == 3:
        images = images[:, None]
    if images.ndim != 4:
        raise DataError(f"{images_path}: expected 3 or 4 dims, got {images.ndim}")
    return Dataset(images.astype(np.float32) / 255.0, labels.astype(np.int64), num_classes)


def export_idx(dataset: Dataset, images_path, labels_path) -> None:
    pixels = np.rint(dataset.images * 255.0).astype(np.uint8)
    write_idx(images_path, pixels[:, 0] if dataset.channels == 1 else pixels)
    write_idx(labels_path, dataset.labels.astype(np.uint8))


def _smooth_field(rng, channels, res, coarse):
    grid = rng.standard_normal((channels, coarse, coarse))
    img = _bilinear(grid[None].astype(np.float64), res)[0]
    return img / img.std()


def synth_templates(m: int, channels: int, resolution: int, seed: int, grid: int = 4,
                    shared: float = 0.0, modes: int = 1) -> np.ndarray:
    """Smooth random prototype patterns, ``modes`` per class, shape [m * modes, C, H, W].

    Prototype ``k`` belongs to class ``k % m``.  An optional common base pattern
    is added to all of them.
    """
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0]))
    own = np.stack([_smooth_field(rng, channels, resolution, grid) for _ in range(m * modes)])
    if shared:
        own = own + shared * _smooth_field(rng, channels, resolution, grid)[None]
    return own


def synth_generate(m: int, n_per_class: int, resolution: int = 32, seed: int = 0, split: int = 0,
                   channels: int = 3, noise: float = 0.9, distractor: float = 0.6,
                   max_shift: int = 3, grid: int = 4, shared: float = 0.0, modes: int = 1) -> Dataset:
    """Class-conditional images: a per-class smooth template, randomly scaled and
    shifted, blended with another class's template, plus pixel noise.

    ``split`` selects an independent sample stream over the same templates, so
    train and test sets share classes but not samples.  Pixels are quantized to
    multiples of 1/255, which makes IDX export lossless.
    """
    if m < 2:
        raise DataError("need at least 2 classes")
    templates = synth_templates(m, channels, resolution, seed, grid, shared, modes)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 1, split]))
    n = m * n_per_class
    labels = np.repeat(np.arange(m), n_per_class)
    labels = labels[rng.permutation(n)]
    proto = labels + m * rng.integers(0, modes, size=n)
    other = (labels + rng.integers(1, m, size=n)) % m + m * rng.integers(0, modes, size=n)
    amp = rng.uniform(0.6, 1.4, size=n)
    mix = rng.uniform(0.0, distractor, size=n)
    shifts = rng.integers(-max_shift, max_shift + 1, size=(n, 2))
    pix = rng.standard_normal((n, channels, resolution, resolution))
    images = np.empty((n, channels, resolution, resolution), dtype=np.float64)
    for i in range(n):
        t = amp[i] * templates[proto[i]] + mix[i] * templates[other[i]]
        t = np.roll(t, tuple(shifts[i]), axis=(1, 2))
        images[i] = t + noise * pix[i]
    images = np.clip(0.5 + 0.18 * images, 0.0, 1.0)
    images = (np.rint(images * 255.0) / 255.0).astype(np.float32)
    return Dataset(images, labels, m)


def nearest_template_accuracy(dataset: Dataset, templates: np.ndarray) -> float:
    """Accuracy of assigning each image to the most correlated class template."""
    x = dataset.images.reshape(len(dataset), -1).astype(np.float64)
    x = x - x.mean(axis=1, keepdims=True)
    t = templates.reshape(len(templates), -1)
    t = t - t.mean(axis=1, keepdims=True)
    t = t / np.linalg.norm(t, axis=1, keepdims=True)
    return float(((x @ t.T).argmax(axis=1) % dataset.num_classes == dataset.labels).mean())


# -- transforms on whole datasets -------------------------------------------


def subset_few_sample(dataset: Dataset, retain_fraction: float, seed: int) -> Dataset:
    """Keep floor(fraction * n_class) (at least 1) random items of every class."""
    if not 0 < retain_fraction <= 1:
        raise DataError(f"retain_fraction must lie in (0, 1], got {retain_fraction}")
    counts = dataset.class_counts()
    if (counts == 0).any():
        raise DataError(f"class {int(np.argmin(counts))} has no samples")
    if retain_fraction == 1:
        return dataset
    keep = []
    for c in range(dataset.num_classes):
        idx = np.flatnonzero(dataset.labels == c)
        k = max(1, int(np.floor(retain_fraction * len(idx))))
        rng = np.random.default_rng(np.random.SeedSequence([seed, 2, c]))
        keep.append(rng.choice(idx, size=k, replace=False))
    keep = np.sort(np.concatenate(keep))
    return replace(dataset, images=dataset.images[keep], labels=dataset.labels[keep])


def _interp_matrix(src: int, dst: int) -> np.ndarray:
    """Half-pixel-centred linear interpolation weights, shape [dst, src]."""
    a = np.zeros((dst, src))
    scale = src / dst
    for i in range(dst):
        pos = min(max((i + 0.5) * scale - 0.5, 0.0), src - 1)
        lo = int(np.floor(pos))
        hi = min(lo + 1, src - 1)
        w = pos - lo
        a[i, lo] += 1 - w
        a[i, hi] += w
    return a


def _bilinear(images: np.ndarray, target: int) -> np.ndarray:
    a = _interp_matrix(images.shape[-2], target)
    b = _interp_matrix(images.shape[-1], target)
    return np.einsum("ih,nchw,jw->ncij", a, images, b)


def downsample(dataset: Dataset, target: int) -> Dataset:
    native = dataset.resolution
    if target > native:
        raise DataError(f"cannot downsample {native}x{native} to larger {target}x{target}")
    if target == native:
        return dataset
    out = _bilinear(dataset.images.astype(np.float64), target).astype(np.float32)
    return replace(dataset, images=out)


# -- batching ---------------------------------------------------------------


def _splitmix64(x: np.ndarray) -> np.ndarray:
    x = x + np.uint64(0x9E3779B97F4A7C15)
    x = (x ^ (x >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    x = (x ^ (x >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return x ^ (x >> np.uint64(31))


def sample_keys(seed: int, epoch: int, indices: np.ndarray, stream: int = 0) -> np.ndarray:
    """Counter-based 64-bit random words, one per sample index."""
    with np.errstate(over="ignore"):
        k = _splitmix64(np.full(indices.shape, seed, dtype=np.uint64))
        k = _splitmix64(k ^ np.uint64(epoch))
        k = _splitmix64(k ^ np.uint64(stream))
        return _splitmix64(k ^ indices.astype(np.uint64))


def augment_params(seed, epoch, indices, stream, padding):
    """(dy, dx, flip) per sample, drawn from disjoint bit fields of one key."""
    keys = sample_keys(seed, epoch, np.asarray(indices), stream)
    span = np.uint64(2 * padding + 1)
    dy = (keys % span).astype(np.int64)
    dx = ((keys >> np.uint64(16)) % span).astype(np.int64)
    flip = ((keys >> np.uint64(40)) & np.uint64(1)).astype(bool)
    return dy, dx, flip


def epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    return np.random.default_rng(np.random.SeedSequence([seed, 3, epoch])).permutation(n)


def normalize(images: np.ndarray, mean, std) -> np.ndarray:
    mean = np.asarray(mean, np.float32).reshape(1, -1, 1, 1)
    std = np.asarray(std, np.float32).reshape(1, -1, 1, 1)
    return (images - mean) / std


def transform(dataset: Dataset, indices: np.ndarray, epoch: int, seed: int,
              augmentation: Augmentation, stream: int = 0, dtype=np.float32) -> np.ndarray:
    """Pad-crop, flip (training) and normalize the given samples."""
    x = dataset.images[indices]
    if augmentation.enabled:
        p = augmentation.crop_padding
        dy, dx, flip = augment_params(seed, epoch, indices, stream, p)
        if p:
            res_h, res_w = x.shape[2], x.shape[3]
            padded = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
            x = np.stack([padded[i, :, dy[i]:dy[i] + res_h, dx[i]:dx[i] + res_w]
                          for i in range(len(indices))])
        if augmentation.hflip:
            x = np.where(flip[:, None, None, None], x[..., ::-1], x)
    if dataset.mean is None:
        dataset = dataset.with_stats()
    return normalize(x, dataset.mean, dataset.std).astype(dtype, copy=False)


def batch_indices(n: int, batch_size: int, order: Optional[np.ndarray] = None) -> list:
    if batch_size < 1:
        raise DataError("batch_size must be at least 1")
    order = np.arange(n) if order is None else order
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def augment_and_batch(dataset: Dataset, batch_size: int, epoch: int, seed: int,
                      augmentation: Augmentation, stream: int = 0, shuffle: bool = True,
                      workers: int = 1) -> list:
    """All batches of one epoch, in order; the last partial batch is kept."""
    return list(BatchStream(dataset, batch_size, epoch, seed, augmentation, [stream], shuffle, workers).
                single())


class BatchStream:
    """Yields, per batch, one LabeledBatch per requested augmentation stream.

    All streams see the same samples in the same order; only crops and flips
    differ between streams.  With ``workers > 1`` batches are prepared on a
    thread pool, which cannot change their contents.
    """

    def __init__(self, dataset: Dataset, batch_size: int, epoch: int, seed: int,
                 augmentation: Augmentation, streams: Sequence[int] = (0,), shuffle: bool = True,
                 workers: int = 1):
        if dataset.mean is None:
            dataset = dataset.with_stats()
        self.dataset = dataset
        self.epoch, self.seed = epoch, seed
        self.augmentation = augmentation
        self.streams = list(streams)
        order = epoch_order(len(dataset), seed, epoch) if shuffle else None
        self.chunks = batch_indices(len(dataset), batch_size, order)
        self.workers = max(1, int(workers))

    def _make(self, idx):
        return tuple(
            LabeledBatch(Tensor(transform(self.dataset, idx, self.epoch, self.seed, self.augmentation, s)),
                         self.dataset.labels[idx], idx)
            for s in self.streams
        )

    def __len__(self) -> int:
        return len(self.chunks)

    def __iter__(self) -> Iterator[tuple]:
        if self.workers == 1:
            for idx in self.chunks:
                yield self._make(idx)
            return
        with ThreadPoolExecutor(self.workers) as pool:
            yield from pool.map(self._make, self.chunks)

    def single(self) -> Iterator[LabeledBatch]:
        for batches in self:
            yield batches[0]


# -- spec -------------------------------------------------------------------


@dataclass
class DatasetSpec:
    source: str = "synthetic"  # synthetic | cifar_binary | idx
    num_classes: int = 10
    resolution: int = 32
    channels: int = 3
    train_path: Optional[str] = None
    test_path: Optional[str] = None
    train_labels_path: Optional[str] = None
    test_labels_path: Optional[str] = None
    n_per_class: int = 200
    n_test_per_class: int = 50
    synth_seed: int = 0
    noise: float = 1.5
    distractor: float = 0.5
    template_grid: int = 6
    max_shift: int = 2
    shared: float = 0.0
    modes: int = 4
    mean: Optional[list] = None
    std: Optional[list] = None
    retain_fraction: float = 1.0
    subset_seed: int = 5
    downsample_to: Optional[int] = None
    augment: bool = True
    crop_padding: int = 4
    hflip: bool = True

    def __post_init__(self):
        if self.source not in ("synthetic", "cifar_binary", "idx"):
            raise DataError(f"unknown dataset source {self.source!r}")
        if not 0 < self.retain_fraction <= 1:
            raise DataError(f"retain_fraction must lie in (0, 1], got {self.retain_fraction}")
        if self.downsample_to is not None and self.downsample_to > self.resolution:
            raise DataError(f"downsample_to {self.downsample_to} exceeds native resolution {self.resolution}")

    @property
    def effective_resolution(self) -> int:
        return self.downsample_to or self.resolution

    def augmentation(self) -> Augmentation:
        return Augmentation(self.augment, self.crop_padding, self.hflip)


def load_split(spec: DatasetSpec, split: str) -> Dataset:
    if spec.source == "synthetic":
        n = spec.n_per_class if split == "train" else spec.n_test_per_class
        return synth_generate(spec.num_classes, n, spec.resolution, spec.synth_seed,
                              split=0 if split == "train" else 1, channels=spec.channels, noise=spec.noise,
                              distractor=spec.distractor, max_shift=spec.max_shift,
                              grid=spec.template_grid, shared=spec.shared, modes=spec.modes)
    path = spec.train_path if split == "train" else spec.test_path
    if path is None:
        raise DataError(f"dataset source {spec.source} needs a {split}_path")
    if spec.source == "cifar_binary":
        return load_cifar_binary(path, spec.num_classes)
    labels = spec.train_labels_path if split == "train" else spec.test_labels_path
    if labels is None:
        raise DataError(f"idx source needs {split}_labels_path")
    return load_idx(path, labels, spec.num_classes)


def build_datasets(spec: DatasetSpec):
    """(train, test) with subsetting, downsampling and normalization statistics applied.

    Subsetting only touches the training set; statistics come from the
    (retained) training images unless configured.
    """
    train, test = load_split(spec, "train"), load_split(spec, "test")
    for d, name in ((train, "train"), (test, "test")):
        if d.resolution != spec.resolution or d.channels != spec.channels:
            raise DataError(f"{name} images are {d.channels}x{d.resolution}x{d.resolution}, spec says "
                            f"{spec.channels}x{spec.resolution}x{spec.resolution}")
    train = subset_few_sample(train, spec.retain_fraction, spec.subset_seed)
    if spec.downsample_to is not None:
        train, test = downsample(train, spec.downsample_to), downsample(test, spec.downsample_to)
    train = train.with_stats(spec.mean, spec.std)
    test = test.with_stats(train.mean, train.std)
    return train, test
