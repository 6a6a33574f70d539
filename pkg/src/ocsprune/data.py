"""Dataset ingestion: MNIST IDX, CIFAR-10 binary batches and a synthetic generator."""
from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
MNIST_MEAN, MNIST_STD = 0.1307, 0.3081


class DatasetError(ValueError):
    pass


@dataclass
class DatasetHandle:
    x_train: np.ndarray
    y_train: np.ndarray
    x_eval: np.ndarray
    y_eval: np.ndarray
    num_classes: int
    mean: float = 0.0
    std: float = 1.0
    name: str = "dataset"
    templates: np.ndarray | None = None

    @property
    def sample_shape(self) -> tuple[int, ...]:
        return tuple(self.x_train.shape[1:])

    def astype(self, dtype) -> "DatasetHandle":
        return DatasetHandle(self.x_train.astype(dtype), self.y_train, self.x_eval.astype(dtype),
                             self.y_eval, self.num_classes, self.mean, self.std, self.name,
                             self.templates)


def _read(path) -> bytes:
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as fh:
        return fh.read()


def read_idx(path, expected_magic: int) -> np.ndarray:
    """Parse one IDX file (optionally gzipped) into a uint8 array."""
    raw = _read(path)
    if len(raw) < 8:
        raise DatasetError(f"{path}: truncated header")
    magic = struct.unpack(">I", raw[:4])[0]
    if magic != expected_magic:
        raise DatasetError(f"{path}: bad magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise DatasetError(f"{path}: truncated header")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    n = int(np.prod(dims))
    if len(raw) - header != n:
        raise DatasetError(f"{path}: length mismatch, header says {n} bytes, found {len(raw) - header}")
    return np.frombuffer(raw, dtype=np.uint8, offset=header).reshape(dims)


def _find(root: Path, stem: str) -> Path:
    for cand in (root / stem, root / f"{stem}.gz"):
        if cand.exists():
            return cand
    raise DatasetError(f"missing MNIST file {stem}[.gz] under {root}")


def load_mnist_idx(path, mean: float = MNIST_MEAN, std: float = MNIST_STD) -> DatasetHandle:
    """Load the canonical four MNIST files from a directory."""
    root = Path(path)
    parts = {}
    for split, prefix in (("train", "train"), ("eval", "t10k")):
        images = read_idx(_find(root, f"{prefix}-images-idx3-ubyte"), IDX_IMAGES_MAGIC)
        labels = read_idx(_find(root, f"{prefix}-labels-idx1-ubyte"), IDX_LABELS_MAGIC)
        if images.shape[0] != labels.shape[0]:
            raise DatasetError(f"{split}: {images.shape[0]} images but {labels.shape[0]} labels")
        x = images.astype(np.float32)[:, None] / 255.0
        parts[split] = ((x - mean) / std, labels.astype(np.int64))
    return DatasetHandle(*parts["train"], *parts["eval"], num_classes=10, mean=mean, std=std,
                         name="mnist")


def load_cifar10_batches(paths_train, paths_eval, mean=0.4734, std=0.2516) -> DatasetHandle:
    """CIFAR-10 binary format: 3073-byte records (label byte + 3x32x32 pixels)."""
    def load(paths):
        xs, ys = [], []
        for p in paths:
            raw = np.frombuffer(_read(p), dtype=np.uint8)
            if raw.size % 3073:
                raise DatasetError(f"{p}: size {raw.size} is not a multiple of 3073")
            rec = raw.reshape(-1, 3073)
            ys.append(rec[:, 0].astype(np.int64))
            xs.append(rec[:, 1:].reshape(-1, 3, 32, 32).astype(np.float32) / 255.0)
        return (np.concatenate(xs) - mean) / std, np.concatenate(ys)
    return DatasetHandle(*load(paths_train), *load(paths_eval), num_classes=10, mean=mean, std=std,
                         name="cifar10")


def synth_dataset(seed: int = 0, classes: int = 3, samples: int = 600, shape=(1, 8, 8),
                  noise: float = 1.0, eval_samples: int | None = None) -> DatasetHandle:
    """Gaussian class templates plus i.i.d. Gaussian noise, balanced classes.

    Images are standardised with the generator's own mean/std so the
    normalisation constants travel with the handle.
    """
    if classes < 2:
        raise ValueError("need at least two classes")
    rng = np.random.default_rng(seed)
    templates = rng.standard_normal((classes, *shape))
    eval_samples = samples // 2 if eval_samples is None else eval_samples

    def draw(n):
        y = np.arange(n) % classes
        rng.shuffle(y)
        x = templates[y] + noise * rng.standard_normal((n, *shape))
        return x, y.astype(np.int64)

    xt, yt = draw(samples)
    xe, ye = draw(eval_samples)
    mean, std = float(xt.mean()), float(xt.std())
    return DatasetHandle((xt - mean) / std, yt, (xe - mean) / std, ye, classes, mean, std,
                         name=f"synth-{seed}", templates=templates)
