"""Dataset ingestion, synthetic desk-scale data, augmentation and batching.

CIFAR-10 is read from the standard binary layout: records of exactly 3073
bytes (1 label byte + 1024 R + 1024 G + 1024 B plane bytes, row-major),
five train files of 10000 records and one test file. CIFAR-100 uses the
same reader parameterized for its two label bytes (coarse, fine).
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

CIFAR10_TRAIN_FILES = [f"data_batch_{i}.bin" for i in range(1, 6)]
CIFAR10_TEST_FILES = ["test_batch.bin"]
RECORD_BYTES_C10 = 3073
RECORD_BYTES_C100 = 3074


class DatasetError(ValueError):
    pass


@dataclass
class Dataset:
    images: np.ndarray  # N x 3 x S x S float32 in [0, 1]
    labels: np.ndarray  # N int64
    split: str          # "train" | "test"
    mean: np.ndarray    # per-channel, computed on the training split
    std: np.ndarray

    def __post_init__(self):
        if self.images.ndim != 4 or len(self.images) == 0:
            raise DatasetError("images must be a non-empty N x C x H x W array")
        if len(self.labels) != len(self.images):
            raise DatasetError("labels and images disagree in length")
        if not (np.isfinite(self.mean).all() and np.isfinite(self.std).all() and (self.std > 0).all()):
            raise DatasetError("normalization stats must be finite with positive std")

    def __len__(self) -> int:
        return len(self.images)

    @property
    def num_classes(self) -> int:
        return int(self.labels.max()) + 1

    @property
    def side(self) -> int:
        return self.images.shape[2]


@dataclass
class AugmentPolicy:
    crop_padding: int = 4
    cutout_size: int = 16
    horizontal_flip: bool = True
    enabled: bool = True

    def __post_init__(self):
        if self.crop_padding < 0 or self.cutout_size < 0:
            raise DatasetError("crop_padding and cutout_size must be non-negative")


def compute_normalization(images: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mean = images.mean(axis=(0, 2, 3), dtype=np.float64)
    std = images.std(axis=(0, 2, 3), dtype=np.float64)
    return mean.astype(np.float32), std.astype(np.float32)


def _read_records(path: Path, record_bytes: int) -> np.ndarray:
    if not path.exists():
        raise FileNotFoundError(f"dataset file missing: {path}")
    raw = np.frombuffer(path.read_bytes(), dtype=np.uint8)
    if raw.size == 0 or raw.size % record_bytes:
        raise DatasetError(
            f"{path} is truncated: {raw.size} bytes is not a multiple of {record_bytes}")
    return raw.reshape(-1, record_bytes)


def _parse_cifar(paths, record_bytes, label_byte, num_classes):
    labels, images = [], []
    for p in paths:
        rec = _read_records(p, record_bytes)
        lab = rec[:, label_byte].astype(np.int64)
        if (lab >= num_classes).any():
            raise DatasetError(f"{p}: label byte exceeds {num_classes - 1}")
        labels.append(lab)
        pix = rec[:, record_bytes - 3072:].reshape(-1, 3, 32, 32)
        images.append(pix.astype(np.float32) / 255.0)
    return np.concatenate(images), np.concatenate(labels)


def _resolve_root(root, subdir_hint: str, probe: str) -> Path:
    root = Path(root)
    # accept either the directory holding the .bin files or its parent archive dir
    if not (root / probe).exists() and (root / subdir_hint).is_dir():
        return root / subdir_hint
    return root


def load_cifar10(root) -> tuple[Dataset, Dataset]:
    root = _resolve_root(root, "cifar-10-batches-bin", CIFAR10_TRAIN_FILES[0])
    tr_img, tr_lab = _parse_cifar([root / f for f in CIFAR10_TRAIN_FILES], RECORD_BYTES_C10, 0, 10)
    te_img, te_lab = _parse_cifar([root / f for f in CIFAR10_TEST_FILES], RECORD_BYTES_C10, 0, 10)
    mean, std = compute_normalization(tr_img)
    train = Dataset(tr_img, tr_lab, "train", mean, std)
    test = Dataset(te_img, te_lab, "test", mean, std)
    return train, test


def load_cifar100(root, label_mode: str = "fine") -> tuple[Dataset, Dataset]:
    root = _resolve_root(root, "cifar-100-binary", "train.bin")
    byte = {"coarse": 0, "fine": 1}[label_mode]
    classes = {"coarse": 20, "fine": 100}[label_mode]
    tr_img, tr_lab = _parse_cifar([root / "train.bin"], RECORD_BYTES_C100, byte, classes)
    te_img, te_lab = _parse_cifar([root / "test.bin"], RECORD_BYTES_C100, byte, classes)
    mean, std = compute_normalization(tr_img)
    return (Dataset(tr_img, tr_lab, "train", mean, std),
            Dataset(te_img, te_lab, "test", mean, std))


def data_root(explicit=None) -> Path:
    """Dataset root: explicit argument, else the DISSIM_DATA_DIR fallback."""
    if explicit:
        return Path(explicit)
    env = os.environ.get("DISSIM_DATA_DIR")
    if env:
        return Path(env)
    return Path("data")


def synth_dataset(seed: int, n: int, classes: int = 10, side: int = 32,
                  split: str = "train", signal: float = 0.35,
                  noise: float = 0.12) -> Dataset:
    """Class-conditional blob images: shared smooth class patterns plus noise.

    The class patterns depend only on ``seed`` so that train/test splits drawn
    with the same seed share them; the additive noise stream differs per split.
    At the default signal/noise mix a small model clears 80% accuracy within
    a few epochs; lower the ratio for harder, error-bearing variants.
    """
    if n < classes or classes < 2 or side < 8:
        raise DatasetError(f"invalid synth sizes: n={n}, classes={classes}, side={side}")
    pattern_rng = np.random.default_rng(seed)
    coarse = pattern_rng.standard_normal((classes, 3, 4, 4))
    patterns = np.kron(coarse, np.ones((1, 1, side // 4 + 1, side // 4 + 1)))[:, :, :side, :side]
    patterns /= np.abs(patterns).max(axis=(1, 2, 3), keepdims=True)

    noise_rng = np.random.default_rng([seed, {"train": 1, "test": 2}[split]])
    labels = np.arange(n) % classes  # round-robin keeps classes balanced
    eta = noise_rng.standard_normal((n, 3, side, side))
    images = np.clip(0.5 + signal * patterns[labels] + noise * eta, 0.0, 1.0).astype(np.float32)
    mean, std = compute_normalization(images)
    return Dataset(images, labels.astype(np.int64), split, mean, std)


def synth_splits(seed: int, n_train: int, n_test: int, classes: int = 10,
                 side: int = 32, signal: float = 0.35,
                 noise: float = 0.12) -> tuple[Dataset, Dataset]:
    train = synth_dataset(seed, n_train, classes, side, "train", signal, noise)
    test = synth_dataset(seed, n_test, classes, side, "test", signal, noise)
    test.mean, test.std = train.mean, train.std  # test normalized with train stats
    return train, test


def augment(image: np.ndarray, rng: np.random.Generator, policy: AugmentPolicy | None,
            mean: np.ndarray, std: np.ndarray) -> np.ndarray:
    """Flip -> pad-and-random-crop -> cutout -> normalize. Deterministic given rng."""
    c, h, w = image.shape
    out = image
    if policy is not None and policy.enabled:
        if policy.cutout_size > min(h, w):
            raise DatasetError("cutout_size exceeds image side")
        if policy.horizontal_flip and rng.random() < 0.5:
            out = out[:, :, ::-1]
        if policy.crop_padding:
            p = policy.crop_padding
            padded = np.zeros((c, h + 2 * p, w + 2 * p), dtype=out.dtype)
            padded[:, p:p + h, p:p + w] = out
            dy, dx = rng.integers(0, 2 * p + 1, size=2)
            out = padded[:, dy:dy + h, dx:dx + w]
        if policy.cutout_size:
            s = policy.cutout_size
            cy, cx = int(rng.integers(0, h)), int(rng.integers(0, w))
            y0, y1 = max(cy - s // 2, 0), min(cy + s - s // 2, h)
            x0, x1 = max(cx - s // 2, 0), min(cx + s - s // 2, w)
            out = out.copy()
            out[:, y0:y1, x0:x1] = 0.0
    mean = np.asarray(mean, dtype=np.float32).reshape(c, 1, 1)
    std = np.asarray(std, dtype=np.float32).reshape(c, 1, 1)
    return ((out - mean) / std).astype(np.float32)


def num_batches(n: int, batch_size: int) -> int:
    """How many batches `batches` will yield for n examples."""
    full, rem = divmod(n, batch_size)
    return full + (1 if rem >= min(batch_size, 4) else 0)


def batches(ds: Dataset, batch_size: int, shuffle_seed: int | None = None,
            policy: AugmentPolicy | None = None, epoch: int = 0,
            drop_small: bool = True):
    """Yield (images, labels) batches in a seed-determined order.

    shuffle_seed=None gives the unshuffled, unaugmented test-mode iteration.
    A final partial batch smaller than 4 is dropped (HSIC needs n >= 4)
    unless drop_small is False (accuracy-style evaluation wants every sample).
    """
    n = len(ds)
    if batch_size < 1:
        raise DatasetError("batch_size must be >= 1")
    if batch_size > n:
        raise DatasetError(f"batch_size {batch_size} exceeds dataset size {n}")
    if shuffle_seed is None:
        order = np.arange(n)
        rng = None
    else:
        rng = np.random.default_rng([shuffle_seed, epoch])
        order = rng.permutation(n)
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        if drop_small and len(idx) < min(batch_size, 4):
            break  # partial remainder below the HSIC floor
        imgs = np.empty((len(idx), *ds.images.shape[1:]), dtype=np.float32)
        for row, i in enumerate(idx):
            imgs[row] = augment(ds.images[i], rng, policy if rng is not None else None,
                                ds.mean, ds.std)
        yield imgs, ds.labels[idx]
