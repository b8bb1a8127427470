"""Dataset loading (MNIST IDX, CIFAR-10 binary) and synthetic data."""
from __future__ import annotations

import gzip
import math
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .exceptions import FormatError, ValidationError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


@dataclass(frozen=True)
class LabeledDataset:
    images: np.ndarray  # (count, channels, H, W), float64 in [0, 1]
    labels: np.ndarray  # (count,), int64
    split: str = "train"
    n_classes: int = 10

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise ValidationError(f"{len(self.images)} images but {len(self.labels)} labels")
        if self.images.ndim != 4:
            raise ValidationError(f"images must be (count, channels, H, W), got {self.images.shape}")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise ValidationError("label outside [0, n_classes)")

    def __len__(self) -> int:
        return len(self.labels)

    def take(self, index) -> "LabeledDataset":
        return LabeledDataset(self.images[index], self.labels[index], self.split, self.n_classes)


def _read_bytes(path) -> bytes:
    raw = Path(path).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        try:
            return gzip.decompress(raw)
        except EOFError as exc:
            raise OSError(f"{path}: truncated gzip stream") from exc
    return raw


def _parse_idx(raw: bytes, path, expected_magic: int) -> tuple[tuple[int, ...], bytes]:
    if len(raw) < 8:
        raise OSError(f"{path}: truncated IDX header")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise FormatError(f"{path}: magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise OSError(f"{path}: truncated IDX header")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    body = raw[header:]
    if len(body) < math.prod(dims):
        raise OSError(f"{path}: truncated IDX body ({len(body)} of {math.prod(dims)} bytes)")
    return dims, body[: math.prod(dims)]


def load_mnist_idx(image_path, label_path, split: str = "train") -> LabeledDataset:
    """Read an MNIST image/label IDX pair (plain or gzip); pixels scaled by 1/255."""
    dims, body = _parse_idx(_read_bytes(image_path), image_path, IDX_IMAGES_MAGIC)
    count, rows, cols = dims
    images = np.frombuffer(body, dtype=np.uint8).reshape(count, 1, rows, cols) / 255.0
    (n_labels,), lbody = _parse_idx(_read_bytes(label_path), label_path, IDX_LABELS_MAGIC)
    labels = np.frombuffer(lbody, dtype=np.uint8).astype(np.int64)
    if n_labels != count:
        raise ValidationError(f"{count} images but {n_labels} labels")
    return LabeledDataset(images, labels, split)


def save_mnist_idx(dataset: LabeledDataset, image_path, label_path) -> None:
    """Write ``dataset`` as IDX; gzip-compressed when the path ends in ``.gz``."""
    n, c, h, w = dataset.images.shape
    if c != 1:
        raise ValidationError("IDX image files hold single-channel images")
    pixels = np.clip(np.rint(dataset.images * 255.0), 0, 255).astype(np.uint8)
    img = struct.pack(">IIII", IDX_IMAGES_MAGIC, n, h, w) + pixels.tobytes()
    lab = struct.pack(">II", IDX_LABELS_MAGIC, n) + dataset.labels.astype(np.uint8).tobytes()
    for path, blob in ((image_path, img), (label_path, lab)):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        # mtime=0 keeps gzip output byte-stable
        path.write_bytes(gzip.compress(blob, mtime=0) if path.suffix == ".gz" else blob)


def find_mnist(directory) -> dict[str, tuple[Path, Path]]:
    """Locate the canonical MNIST file names (optionally ``.gz``) in ``directory``."""
    directory = Path(directory)
    found = {}
    for split, names in MNIST_FILES.items():
        paths = []
        for name in names:
            for candidate in (directory / name, directory / f"{name}.gz"):
                if candidate.exists():
                    paths.append(candidate)
                    break
        if len(paths) == 2:
            found[split] = tuple(paths)
    return found


def load_mnist(directory, split: str) -> LabeledDataset:
    files = find_mnist(directory)
    if split not in files:
        raise FileNotFoundError(f"no MNIST {split} files in {directory}")
    return load_mnist_idx(*files[split], split=split)


def default_mnist_dir() -> Path:
    return Path(os.environ.get("QRKD_MNIST_DIR", "data/mnist"))


def subset(dataset: LabeledDataset, n: int, seed: int) -> LabeledDataset:
    """Class-stratified sample of ``n`` items, in a seed-determined order.

    Each class receives ``n * count_c / count`` items, with leftover slots
    going to the largest fractional remainders.
    """
    total = len(dataset)
    if not 0 < n <= total:
        raise ValidationError(f"subset size must be in [1, {total}], got {n}")
    rng = np.random.default_rng(seed)
    classes, counts = np.unique(dataset.labels, return_counts=True)
    exact = n * counts / total
    quota = np.floor(exact).astype(int)
    order = np.argsort(-(exact - quota), kind="stable")
    quota[order[: n - quota.sum()]] += 1
    chosen = []
    for cls, q in zip(classes, quota):
        members = np.flatnonzero(dataset.labels == cls)
        chosen.append(rng.choice(members, size=q, replace=False))
    index = rng.permutation(np.concatenate(chosen))
    return dataset.take(index)


def synthetic_blobs(classes: int, per_class: int, dim: int, spread: float, seed: int,
                    split: str = "train") -> LabeledDataset:
    """Gaussian clusters around random centers in the unit cube, clamped to [0, 1].

    Images are shaped (1, s, s) when ``dim == s*s``, otherwise (1, 1, dim).
    """
    if min(classes, per_class, dim) <= 0 or spread < 0:
        raise ValidationError("synthetic_blobs parameters must be positive")
    rng = np.random.default_rng(seed)
    centers = rng.uniform(0.0, 1.0, size=(classes, dim))
    labels = np.repeat(np.arange(classes), per_class)
    points = centers[labels] + spread * rng.standard_normal((labels.size, dim))
    points = np.clip(points, 0.0, 1.0)
    side = math.isqrt(dim)
    shape = (1, side, side) if side * side == dim else (1, 1, dim)
    perm = rng.permutation(labels.size)
    return LabeledDataset(points[perm].reshape((-1,) + shape), labels[perm], split, classes)


def load_cifar10_binary(paths, split: str = "train") -> LabeledDataset:
    """Read CIFAR-10 binary batches (1 label byte + 3072 pixel bytes per record)."""
    records = []
    for path in [paths] if isinstance(paths, (str, Path)) else paths:
        raw = _read_bytes(path)
        if len(raw) % 3073:
            raise OSError(f"{path}: size {len(raw)} is not a whole number of CIFAR records")
        records.append(np.frombuffer(raw, dtype=np.uint8).reshape(-1, 3073))
    data = np.concatenate(records)
    return LabeledDataset(data[:, 1:].reshape(-1, 3, 32, 32) / 255.0, data[:, 0].astype(np.int64), split)
