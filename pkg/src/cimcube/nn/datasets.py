"""Dataset loaders: IDX (Fashion-MNIST) and CIFAR-10 binary batches.

Files are read from user-supplied paths; nothing downloads inside the
library. The CLI `fetch` subcommand retrieves and checksum-verifies the
published distribution files.
"""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..device_models import InvalidInputError

__all__ = ["Dataset", "FormatError", "load_dataset", "load_idx",
           "load_cifar10_batch", "DATASET_FILES"]


class FormatError(ValueError):
    """A dataset file is malformed; the message names the offending offset."""


@dataclass(frozen=True)
class Dataset:
    """Train/test splits with pixels normalized to [0, 1], HWC layout."""

    name: str
    train_images: np.ndarray
    train_labels: np.ndarray
    test_images: np.ndarray
    test_labels: np.ndarray

    @property
    def input_shape(self):
        return self.test_images.shape[1:]

    @property
    def n_classes(self) -> int:
        return 10


_IDX_DTYPES = {0x08: np.uint8, 0x09: np.int8, 0x0B: ">i2",
               0x0C: ">i4", 0x0D: ">f4", 0x0E: ">f8"}


def _open_maybe_gz(path: Path):
    if path.suffix == ".gz":
        return gzip.open(path, "rb")
    return open(path, "rb")


def load_idx(path) -> np.ndarray:
    """Parse one IDX file (big-endian magic, dims, payload)."""
    path = Path(path)
    with _open_maybe_gz(path) as f:
        header = f.read(4)
        if len(header) < 4 or header[0] != 0 or header[1] != 0:
            raise FormatError(f"{path}: bad magic {header!r} at offset 0")
        dtype_code, n_dims = header[2], header[3]
        if dtype_code not in _IDX_DTYPES:
            raise FormatError(f"{path}: unknown IDX dtype 0x{dtype_code:02x} at offset 2")
        dims_raw = f.read(4 * n_dims)
        if len(dims_raw) != 4 * n_dims:
            raise FormatError(f"{path}: truncated dimension table at offset 4")
        dims = struct.unpack(f">{n_dims}I", dims_raw)
        dtype = np.dtype(_IDX_DTYPES[dtype_code])
        count = int(np.prod(dims))
        payload = f.read(count * dtype.itemsize)
        if len(payload) != count * dtype.itemsize:
            raise FormatError(
                f"{path}: truncated payload at offset {4 + 4 * n_dims + len(payload)}")
        return np.frombuffer(payload, dtype=dtype).reshape(dims)


_CIFAR_RECORD = 3073  # 1 label byte + 3 * 1024 pixel bytes


def load_cifar10_batch(path) -> tuple[np.ndarray, np.ndarray]:
    """Parse one CIFAR-10 binary batch into (images HWC uint8, labels)."""
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) == 0 or len(raw) % _CIFAR_RECORD != 0:
        raise FormatError(
            f"{path}: length {len(raw)} is not a multiple of {_CIFAR_RECORD} "
            f"(truncated at offset {len(raw) - len(raw) % _CIFAR_RECORD})")
    records = np.frombuffer(raw, dtype=np.uint8).reshape(-1, _CIFAR_RECORD)
    labels = records[:, 0].astype(np.int64)
    if labels.max() > 9:
        raise FormatError(f"{path}: label byte > 9 in record {int(labels.argmax())}")
    images = records[:, 1:].reshape(-1, 3, 32, 32).transpose(0, 2, 3, 1)
    return images, labels


# distribution file names per dataset split
DATASET_FILES = {
    "fmnist": {
        "train_images": "train-images-idx3-ubyte.gz",
        "train_labels": "train-labels-idx1-ubyte.gz",
        "test_images": "t10k-images-idx3-ubyte.gz",
        "test_labels": "t10k-labels-idx1-ubyte.gz",
    },
    "cifar10": {
        "train": [f"data_batch_{i}.bin" for i in range(1, 6)],
        "test": ["test_batch.bin"],
    },
}


def _find(path: Path, name: str) -> Path:
    for candidate in (path / name, path / name.removesuffix(".gz")):
        if candidate.exists():
            return candidate
    raise FileNotFoundError(f"{name} (or ungzipped) not found under {path}")


def load_dataset(name: str, path) -> Dataset:
    """Load a named dataset from its standard distribution files."""
    path = Path(path)
    if name == "fmnist":
        files = DATASET_FILES["fmnist"]
        tri = load_idx(_find(path, files["train_images"]))
        trl = load_idx(_find(path, files["train_labels"]))
        tei = load_idx(_find(path, files["test_images"]))
        tel = load_idx(_find(path, files["test_labels"]))
        for imgs, labels, split in ((tri, trl, "train"), (tei, tel, "test")):
            if imgs.shape[0] != labels.shape[0]:
                raise FormatError(f"{split}: {imgs.shape[0]} images vs "
                                  f"{labels.shape[0]} labels")
        return Dataset("fmnist",
                       tri[..., None].astype(np.float32) / 255.0,
                       trl.astype(np.int64),
                       tei[..., None].astype(np.float32) / 255.0,
                       tel.astype(np.int64))
    if name == "cifar10":
        files = DATASET_FILES["cifar10"]
        train = [load_cifar10_batch(path / f) for f in files["train"]]
        test = [load_cifar10_batch(path / f) for f in files["test"]]
        tri = np.concatenate([im for im, _ in train])
        trl = np.concatenate([lb for _, lb in train])
        tei = np.concatenate([im for im, _ in test])
        tel = np.concatenate([lb for _, lb in test])
        return Dataset("cifar10",
                       tri.astype(np.float32) / 255.0, trl,
                       tei.astype(np.float32) / 255.0, tel)
    raise InvalidInputError(f"unknown dataset {name!r}")


# published SHA-256 checksums of the gzipped distribution files
FETCH_MANIFEST = {
    "fmnist": {
        "base_url": "http://fashion-mnist.s3-website.eu-central-1.amazonaws.com/",
        "files": {
            "train-images-idx3-ubyte.gz":
                "3aede38d61863908ad78613f6a32ed271626dd12800ba2636569512369268a84",
            "train-labels-idx1-ubyte.gz":
                "a04f17134ac03560a47e3764e11b92fc97de4d1bfaf8ba1a3aa29af54cc90845",
            "t10k-images-idx3-ubyte.gz":
                "346e55b948d973a97e58d2351dde16a484bd415d4595297633bb08f03db6a073",
            "t10k-labels-idx1-ubyte.gz":
                "67da17c76eaffca5446c3361aaab5c3cd6d1c2608764d35dfb1850b086bf8dd5",
        },
    },
    "cifar10": {
        "base_url": "https://www.cs.toronto.edu/~kriz/",
        "files": {
            "cifar-10-binary.tar.gz":
                "c4a38c50a1bc5f3a1c5537f2155ab9d68f9f25eb1ed8d9ddda3db29a59bca1dd",
        },
    },
}
