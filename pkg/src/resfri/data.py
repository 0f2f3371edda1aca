"""MNIST IDX and CIFAR-10 binary loaders, preprocessing and seeded batching."""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np

from .tensor import Tensor

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
CIFAR_RECORD = 3073


class DataError(ValueError):
    pass


@dataclass
class Dataset:
    images: np.ndarray  # N x C x H x W float32 in [0, 1]
    labels: np.ndarray  # N int64
    num_classes: int = 10
    name: str = ""

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise DataError(f"{len(self.images)} images but {len(self.labels)} labels")

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, indices) -> "Dataset":
        idx = np.asarray(indices)
        return Dataset(self.images[idx], self.labels[idx], self.num_classes, self.name)


@dataclass
class LabeledBatch:
    images: Tensor
    labels: np.ndarray
    indices: np.ndarray


def _read_bytes(path) -> bytes:
    path = Path(path)
    raw = path.read_bytes()
    return gzip.decompress(raw) if path.suffix == ".gz" else raw


def parse_idx_images(raw: bytes) -> np.ndarray:
    if len(raw) < 16:
        raise DataError("IDX image file truncated")
    magic, n, rows, cols = struct.unpack(">IIII", raw[:16])
    if magic != IDX_IMAGES_MAGIC:
        raise DataError(f"bad IDX image magic 0x{magic:08x}")
    if len(raw) != 16 + n * rows * cols:
        raise DataError(f"IDX image file has {len(raw) - 16} pixel bytes, expected {n * rows * cols}")
    return np.frombuffer(raw, dtype=np.uint8, offset=16).reshape(n, rows, cols)


def parse_idx_labels(raw: bytes) -> np.ndarray:
    if len(raw) < 8:
        raise DataError("IDX label file truncated")
    magic, n = struct.unpack(">II", raw[:8])
    if magic != IDX_LABELS_MAGIC:
        raise DataError(f"bad IDX label magic 0x{magic:08x}")
    if len(raw) != 8 + n:
        raise DataError(f"IDX label file has {len(raw) - 8} labels, header says {n}")
    return np.frombuffer(raw, dtype=np.uint8, offset=8)


def load_mnist_idx(images_path, labels_path) -> Dataset:
    images = parse_idx_images(_read_bytes(images_path))
    labels = parse_idx_labels(_read_bytes(labels_path))
    if len(images) != len(labels):
        raise DataError(f"{len(images)} images but {len(labels)} labels")
    return Dataset((images[:, None] / np.float32(255)).astype(np.float32),
                   labels.astype(np.int64), 10, "mnist")


def write_mnist_idx(images: np.ndarray, labels: np.ndarray, images_path, labels_path) -> None:
    images = np.asarray(images, dtype=np.uint8)
    n, rows, cols = images.shape
    Path(images_path).write_bytes(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, rows, cols) + images.tobytes())
    Path(labels_path).write_bytes(struct.pack(">II", IDX_LABELS_MAGIC, len(labels))
                                  + np.asarray(labels, dtype=np.uint8).tobytes())


def load_cifar10_bin(paths: Sequence) -> Dataset:
    images, labels = [], []
    for path in paths:
        raw = _read_bytes(path)
        if len(raw) == 0 or len(raw) % CIFAR_RECORD:
            raise DataError(f"{path}: length {len(raw)} is not a multiple of {CIFAR_RECORD}")
        rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
        if rec[:, 0].max() > 9:
            raise DataError(f"{path}: label byte {int(rec[:, 0].max())} > 9")
        labels.append(rec[:, 0].astype(np.int64))
        images.append(rec[:, 1:].reshape(-1, 3, 32, 32))
    pix = np.concatenate(images)
    return Dataset((pix / np.float32(255)).astype(np.float32), np.concatenate(labels), 10, "cifar10")


def write_cifar10_bin(images: np.ndarray, labels: np.ndarray, path) -> None:
    images = np.asarray(images, dtype=np.uint8).reshape(len(labels), 3072)
    rec = np.concatenate([np.asarray(labels, dtype=np.uint8)[:, None], images], axis=1)
    Path(path).write_bytes(rec.tobytes())


_MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


def _find(root: Path, stem: str) -> Optional[Path]:
    for sub in ("", "mnist", "MNIST/raw", "mnist/raw"):
        for suffix in ("", ".gz"):
            p = root / sub / (stem + suffix)
            if p.is_file():
                return p
    return None


def load_mnist(data_dir, split: str = "train") -> Dataset:
    root = Path(data_dir)
    img, lab = (_find(root, s) for s in _MNIST_FILES[split])
    if img is None or lab is None:
        raise FileNotFoundError(f"MNIST {split} files not found under {root}")
    return load_mnist_idx(img, lab)


def load_cifar10(data_dir, split: str = "train") -> Dataset:
    root = Path(data_dir)
    for sub in ("cifar-10-batches-bin", "cifar10", ""):
        base = root / sub
        names = [f"data_batch_{i}.bin" for i in range(1, 6)] if split == "train" else ["test_batch.bin"]
        paths = [base / n for n in names]
        if all(p.is_file() for p in paths):
            return load_cifar10_bin(paths)
    raise FileNotFoundError(f"CIFAR-10 {split} batches not found under {root}")


def load_dataset(name: str, data_dir, split: str) -> Dataset:
    if name == "mnist":
        return load_mnist(data_dir, split)
    if name == "cifar10":
        return load_cifar10(data_dir, split)
    raise DataError(f"unknown dataset {name!r}")


# ---------------------------------------------------------------- preprocessing


def to_rgb32(images: np.ndarray) -> np.ndarray:
    """Replicate grayscale to 3 channels and zero-pad smaller images to 32x32."""
    if images.shape[1] == 1:
        images = np.repeat(images, 3, axis=1)
    h, w = images.shape[2:]
    if (h, w) != (32, 32):
        if h > 32 or w > 32:
            raise DataError(f"images of {h}x{w} exceed 32x32")
        top, left = (32 - h) // 2, (32 - w) // 2
        images = np.pad(images, ((0, 0), (0, 0), (top, 32 - h - top), (left, 32 - w - left)))
    return np.ascontiguousarray(images, dtype=np.float32)


@dataclass
class ChannelStats:
    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float32)
        self.std = np.asarray(self.std, dtype=np.float32)
        if not (np.isfinite(self.mean).all() and np.isfinite(self.std).all()) or (self.std <= 0).any():
            raise DataError("normalization stats must be finite with std > 0")

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}


def channel_stats(dataset: Dataset) -> ChannelStats:
    x = to_rgb32(dataset.images).astype(np.float64)
    return ChannelStats(x.mean(axis=(0, 2, 3)), x.std(axis=(0, 2, 3)))


def preprocess_batch(images: np.ndarray, policy: str, stats: Optional[ChannelStats],
                     rng: Optional[np.random.Generator] = None, flip: bool = True) -> np.ndarray:
    """eval: normalize only. train: zero-pad 4, random 32x32 crop, optional flip, normalize."""
    x = to_rgb32(images)
    if policy == "train":
        if rng is None:
            raise ValueError("train policy needs an rng")
        n = len(x)
        padded = np.pad(x, ((0, 0), (0, 0), (4, 4), (4, 4)))
        offsets = rng.integers(0, 9, size=(n, 2))
        flips = rng.random(n) < 0.5
        out = np.empty_like(x)
        for i, (dy, dx) in enumerate(offsets):
            crop = padded[i, :, dy:dy + 32, dx:dx + 32]
            out[i] = crop[:, :, ::-1] if flip and flips[i] else crop
        x = out
    elif policy != "eval":
        raise ValueError(f"policy must be train or eval, got {policy!r}")
    if stats is not None:
        x = (x - stats.mean[None, :, None, None]) / stats.std[None, :, None, None]
    return np.ascontiguousarray(x, dtype=np.float32)


def preprocess(item: np.ndarray, policy: str, stats: Optional[ChannelStats],
               rng: Optional[np.random.Generator] = None, flip: bool = True) -> np.ndarray:
    return preprocess_batch(item[None], policy, stats, rng, flip)[0]


def batches(dataset: Dataset, batch_size: int, shuffle_seed=None, policy: str = "eval",
            stats: Optional[ChannelStats] = None, flip: bool = True, aug_seed=None,
            start: int = 0, dtype=np.float32) -> Iterator[LabeledBatch]:
    """Seeded pass over the dataset; the last short batch is kept.

    Augmentation randomness for batch ``b`` comes from ``(aug_seed, b)`` so a
    pass can resume at batch ``start`` and reproduce the same stream.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    n = len(dataset)
    order = np.arange(n) if shuffle_seed is None else np.random.default_rng(shuffle_seed).permutation(n)
    seed_key = list(np.atleast_1d(aug_seed if aug_seed is not None else 0))
    for b, lo in enumerate(range(0, n, batch_size)):
        if b < start:
            continue
        idx = order[lo:lo + batch_size]
        rng = np.random.default_rng(seed_key + [b]) if policy == "train" else None
        x = preprocess_batch(dataset.images[idx], policy, stats, rng, flip)
        yield LabeledBatch(Tensor(x, dtype=dtype), dataset.labels[idx], idx)


def num_batches(n: int, batch_size: int) -> int:
    return -(-n // batch_size)


def split_holdout(dataset: Dataset, fraction: float, seed) -> tuple[Dataset, Dataset]:
    """Seeded split into (train, validation) with ``floor(fraction * N)`` held out."""
    n = len(dataset)
    k = int(n * fraction)
    if not 0 < k < n:
        raise ValueError(f"holdout of {k} from {n} items is empty or total")
    perm = np.random.default_rng(seed).permutation(n)
    return dataset.subset(np.sort(perm[k:])), dataset.subset(np.sort(perm[:k]))


def mnist_sample_from_mlxtend(n_test: int = 1000, seed: int = 0):
    """Split the 5000 MNIST digits bundled with mlxtend into (train, test) uint8 arrays.

    The rows ship sorted by class, so they are shuffled with ``seed`` first.
    Raises ImportError when mlxtend is not installed.
    """
    from importlib import resources

    path = resources.files("mlxtend.data") / "data" / "mnist_5k.csv.gz"
    with resources.as_file(path) as p:
        raw = np.loadtxt(gzip.open(p, "rt"), delimiter=",", dtype=np.int64)
    perm = np.random.default_rng(seed).permutation(len(raw))
    raw = raw[perm]
    images = raw[:, :-1].astype(np.uint8).reshape(-1, 28, 28)
    labels = raw[:, -1].astype(np.uint8)
    return (images[n_test:], labels[n_test:]), (images[:n_test], labels[:n_test])


def prepare_splits(tcfg, data_dir, seed: int = 0) -> tuple[Dataset, Dataset, Dataset]:
    """(train, validation, test) per a training config.

    ``train_subset``/``val_subset`` take disjoint slices of a seeded permutation of
    the training split; without ``val_subset``, ``val_fraction`` is held out of the
    training pick. ``test_subset`` keeps the first rows of the test split.
    """
    full = load_dataset(tcfg.dataset, data_dir, "train")
    test = load_dataset(tcfg.dataset, data_dir, "test")
    perm = np.random.default_rng(seed).permutation(len(full))
    n_train = tcfg.train_subset or len(full)
    if tcfg.val_subset:
        if n_train + tcfg.val_subset > len(full):
            raise DataError(f"train_subset + val_subset exceeds {len(full)} training items")
        train = full.subset(perm[:n_train])
        val = full.subset(perm[n_train:n_train + tcfg.val_subset])
    else:
        train, val = split_holdout(full.subset(perm[:n_train]), tcfg.val_fraction, seed)
    if tcfg.test_subset:
        test = test.subset(np.arange(min(tcfg.test_subset, len(test))))
    return train, val, test
