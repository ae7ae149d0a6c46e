# Fichier : tests/dfkd/test_datasets_checkpoint.py
import json

import numpy as np
import pytest
import torch

from muse_distill.core.exceptions import CheckpointFormatError, DatasetFormatError
from muse_distill.dfkd.checkpoint import load_checkpoint, load_into, load_tensors, save_checkpoint, save_tensors
from muse_distill.dfkd.datasets import (
    default_handle, handle_from_config, load_dataset, read_cifar_batch, read_idx_images, read_idx_labels,
)
from muse_distill.dfkd.models import build_network
from muse_distill.dfkd.schema import DatasetFormat, DatasetHandle, NetworkSpec
from tests.dfkd.test_data.generate_test_data import write_cifar_batch, write_idx_images, write_idx_labels


# --- IDX ---

@pytest.mark.parametrize("compress", [False, True])
def test_idx_round_trip(tmp_path, compress):
    pixels = np.arange(2 * 4 * 5, dtype=np.uint8).reshape(2, 4, 5)
    path = write_idx_images(tmp_path / "img", pixels, compress=compress)
    images = read_idx_images(path)
    assert images.shape == (2, 1, 4, 5)
    assert np.array_equal(images[:, 0], pixels)
    labels = read_idx_labels(write_idx_labels(tmp_path / "lbl", np.array([3, 7]), compress=compress))
    assert labels.tolist() == [3, 7]


def test_idx_bad_magic(tmp_path):
    path = write_idx_labels(tmp_path / "lbl", np.array([1, 2]))
    with pytest.raises(DatasetFormatError):
        read_idx_images(path)


def test_idx_truncated(tmp_path):
    path = write_idx_images(tmp_path / "img", np.zeros((3, 4, 4), dtype=np.uint8))
    path.write_bytes(path.read_bytes()[:-1])
    with pytest.raises(DatasetFormatError):
        read_idx_images(path)


def test_corrupted_gzip(tmp_path):
    path = tmp_path / "img.gz"
    path.write_bytes(b"\x1f\x8b" + b"pas du gzip")
    with pytest.raises(DatasetFormatError):
        read_idx_images(path)


def test_load_dataset_normalizes_pixels(tmp_path):
    pixels = np.full((2, 28, 28), 255, dtype=np.uint8)
    pixels[1] = 0
    images = write_idx_images(tmp_path / "img", pixels)
    labels = write_idx_labels(tmp_path / "lbl", np.array([4, 9]))
    data = load_dataset(default_handle(DatasetFormat.IDX, "test", [str(images)], str(labels)))
    assert data.images.shape == (2, 1, 28, 28)
    assert float(data.images[0, 0, 0, 0]) == pytest.approx((1.0 - 0.1307) / 0.3081, rel=1e-6)
    assert float(data.images[1, 0, 0, 0]) == pytest.approx(-0.1307 / 0.3081, rel=1e-6)
    assert data.labels.dtype == torch.int64
    assert len(data) == 2


def test_load_dataset_label_beyond_class_count(tmp_path):
    images = write_idx_images(tmp_path / "img", np.zeros((2, 28, 28), dtype=np.uint8))
    labels = write_idx_labels(tmp_path / "lbl", np.array([0, 5]))
    with pytest.raises(DatasetFormatError):
        load_dataset(default_handle(DatasetFormat.IDX, "test", [str(images)], str(labels), num_classes=4))


def test_load_dataset_count_mismatch(tmp_path):
    images = write_idx_images(tmp_path / "img", np.zeros((2, 28, 28), dtype=np.uint8))
    labels = write_idx_labels(tmp_path / "lbl", np.array([0, 1, 2]))
    with pytest.raises(DatasetFormatError):
        load_dataset(default_handle(DatasetFormat.IDX, "test", [str(images)], str(labels)))


def test_load_dataset_shape_mismatch(tmp_path):
    images = write_idx_images(tmp_path / "img", np.zeros((2, 8, 8), dtype=np.uint8))
    labels = write_idx_labels(tmp_path / "lbl", np.array([0, 1]))
    with pytest.raises(DatasetFormatError):
        load_dataset(default_handle(DatasetFormat.IDX, "test", [str(images)], str(labels)))


# --- CIFAR ---

def test_cifar_records(tmp_path):
    pixels = np.zeros((2, 3, 32, 32), dtype=np.uint8)
    pixels[1, 2] = 200
    path = write_cifar_batch(tmp_path / "test_batch.bin", pixels, np.array([6, 1]))
    images, labels = read_cifar_batch(path)
    assert images.shape == (2, 3, 32, 32)
    assert labels.tolist() == [6, 1]
    assert images[1, 2, 5, 5] == 200 and images[1, 0, 5, 5] == 0


def test_cifar_several_files_concatenated(tmp_path):
    a = write_cifar_batch(tmp_path / "a.bin", np.zeros((2, 3, 32, 32), dtype=np.uint8), np.array([0, 1]))
    b = write_cifar_batch(tmp_path / "b.bin", np.zeros((3, 3, 32, 32), dtype=np.uint8), np.array([2, 3, 4]))
    data = load_dataset(default_handle(DatasetFormat.CIFAR, "train", [str(a), str(b)]))
    assert data.images.shape == (5, 3, 32, 32)
    assert data.labels.tolist() == [0, 1, 2, 3, 4]


def test_cifar_bad_length(tmp_path):
    path = tmp_path / "bad.bin"
    path.write_bytes(b"\x00" * 3000)
    with pytest.raises(DatasetFormatError):
        read_cifar_batch(path)


def test_handle_from_config(make_config):
    assert handle_from_config(make_config(), "test") is None
    handle = handle_from_config(make_config(test_images="a.idx", test_labels="b.idx"), "test")
    assert isinstance(handle, DatasetHandle)
    assert handle.image_shape == (1, 8, 8)
    assert handle.mean == [0.1307]


def test_handle_rejects_wrong_normalization_length():
    with pytest.raises(ValueError):
        DatasetHandle(name="x", split="test", source_format=DatasetFormat.CIFAR, image_shape=(3, 32, 32),
                      num_classes=10, mean=[0.5], std=[0.5], images_path=["a"])


# --- Checkpoints ---

def _model(seed: int = 4, widths=(4, 8)):
    return build_network(NetworkSpec(role="teacher", in_channels=1, num_classes=4, widths=list(widths)), seed)


def test_checkpoint_round_trip(tmp_path):
    model = _model()
    model.train()
    model(torch.randn(4, 1, 8, 8))          # stats BN non triviales
    path = tmp_path / "teacher.ckpt"
    save_checkpoint(model, path, meta={"test_top1": 97.5})
    loaded, meta = load_checkpoint(path)
    assert meta == {"test_top1": 97.5}
    assert not loaded.training
    for name, tensor in model.state_dict().items():
        assert torch.equal(tensor, loaded.state_dict()[name])
    sidecar = json.loads((tmp_path / "teacher.ckpt.json").read_text(encoding="utf-8"))
    assert sidecar["spec"]["widths"] == [4, 8]


def test_scalar_and_named_tensors(tmp_path):
    path = tmp_path / "t.bin"
    save_tensors({"a.b": torch.ones(2, 3), "scalaire": torch.tensor(2.5)}, path)
    tensors = load_tensors(path)
    assert tensors["a.b"].shape == (2, 3)
    assert float(tensors["scalaire"]) == 2.5


def test_checkpoint_bad_magic(tmp_path):
    path = tmp_path / "x.ckpt"
    save_checkpoint(_model(), path)
    path.write_bytes(b"NOTACKPT" + path.read_bytes()[8:])
    with pytest.raises(CheckpointFormatError):
        load_checkpoint(path)


def test_checkpoint_truncated(tmp_path):
    path = tmp_path / "x.ckpt"
    save_checkpoint(_model(), path)
    path.write_bytes(path.read_bytes()[:-3])
    with pytest.raises(CheckpointFormatError):
        load_tensors(path)


def test_checkpoint_missing_sidecar(tmp_path):
    path = tmp_path / "x.ckpt"
    save_tensors(_model().state_dict(), path)
    with pytest.raises(CheckpointFormatError):
        load_checkpoint(path)


def test_load_into_shape_mismatch(tmp_path):
    path = tmp_path / "x.ckpt"
    save_checkpoint(_model(widths=(4, 8)), path)
    with pytest.raises(CheckpointFormatError):
        load_into(_model(widths=(4, 6)), path)
    with pytest.raises(CheckpointFormatError):
        load_into(_model(widths=(4, 8, 8)), path)
