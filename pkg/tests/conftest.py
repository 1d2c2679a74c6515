"""Shared fixtures: reference devices, synthetic datasets, a tiny trained net."""

import gzip
import struct

import numpy as np
import pytest
import torch

from cimcube.device_models import reference_rram, reference_tft
from cimcube.nn.datasets import Dataset
from cimcube.nn.network import ConvSpec, DenseSpec, MaxPoolSpec, NetworkSpec
from cimcube.nn.train import TrainConfig, train
from cimcube.periphery import QuantConfig

torch.set_num_threads(max(1, torch.get_num_threads() // 2))


@pytest.fixture(scope="session")
def tft():
    return reference_tft()


@pytest.fixture(scope="session")
def rram():
    return reference_rram()


def make_synth_dataset(n_train=512, n_test=128, side=8, seed=0):
    """Separable 10-class toy images: noisy per-class prototypes in [0, 1]."""
    rng = np.random.default_rng(seed)
    protos = rng.normal(0.5, 0.2, (10, side, side, 1)).clip(0, 1)

    def split(n, s):
        r = np.random.default_rng(s)
        labels = r.integers(0, 10, n)
        imgs = protos[labels] + r.normal(0, 0.05, (n, side, side, 1))
        return imgs.clip(0, 1).astype(np.float32), labels.astype(np.int64)

    tri, trl = split(n_train, seed + 1)
    tei, tel = split(n_test, seed + 2)
    return Dataset("synth", tri, trl, tei, tel)


@pytest.fixture(scope="session")
def synth_data():
    return make_synth_dataset()


TINY_SPEC = NetworkSpec("tiny", (8, 8, 1),
                        (ConvSpec(8), MaxPoolSpec(2), DenseSpec(10)))


@pytest.fixture(scope="session")
def tiny_trained(synth_data):
    """A small conv net trained to high accuracy on the synthetic task."""
    qcfg = QuantConfig()
    result = train(TINY_SPEC, synth_data,
                   TrainConfig(epochs=15, batch_size=64, seed=1), qcfg=qcfg)
    return TINY_SPEC, result, qcfg


def write_idx(path, arr, dtype_code=0x08):
    """Serialize an array in IDX layout (optionally gzipped by suffix)."""
    arr = np.asarray(arr)
    opener = gzip.open if str(path).endswith(".gz") else open
    with opener(path, "wb") as f:
        f.write(struct.pack(">BBBB", 0, 0, dtype_code, arr.ndim))
        f.write(struct.pack(f">{arr.ndim}I", *arr.shape))
        f.write(arr.astype(">u1" if dtype_code == 0x08 else arr.dtype).tobytes())


def write_idx_dataset(dirpath, data: Dataset):
    """Write a Dataset as the four standard distribution files."""
    names = {
        "train-images-idx3-ubyte.gz": (data.train_images[..., 0] * 255).astype(np.uint8),
        "train-labels-idx1-ubyte.gz": data.train_labels.astype(np.uint8),
        "t10k-images-idx3-ubyte.gz": (data.test_images[..., 0] * 255).astype(np.uint8),
        "t10k-labels-idx1-ubyte.gz": data.test_labels.astype(np.uint8),
    }
    for name, arr in names.items():
        write_idx(dirpath / name, arr)


@pytest.fixture(scope="session")
def idx_dataset_dir(tmp_path_factory, synth_data):
    path = tmp_path_factory.mktemp("idxdata")
    write_idx_dataset(path, synth_data)
    return path
