# muse_distill/dfkd/datasets.py

"""
Lecture des datasets réels sur disque : IDX (type MNIST, éventuellement gzip)
et CIFAR binaire (enregistrements de 3073 octets : 1 étiquette + 3·32·32 pixels).
Utilisés pour l'évaluation et le pré-entraînement du professeur.
"""

import gzip
import struct
from pathlib import Path
from typing import NamedTuple, Optional, Union

import numpy as np
import torch

from muse_distill.core.exceptions import DatasetFormatError
from muse_distill.core.logger import get_logger
from muse_distill.dfkd.schema import DEFAULT_NORMALIZATION, DatasetFormat, DatasetHandle, TrainConfig

log = get_logger(__name__)

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
CIFAR_RECORD_BYTES = 3073
CIFAR_SHAPE = (3, 32, 32)


class LabeledImages(NamedTuple):
    images: torch.Tensor        # (N, C, H, W) float32, normalisées
    labels: torch.Tensor        # (N,) int64
    handle: DatasetHandle

    def __len__(self) -> int:
        return self.images.shape[0]


def _read_bytes(path: Union[str, Path]) -> bytes:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as e:
        raise DatasetFormatError(f"Lecture impossible : {path} ({e})") from e
    if raw[:2] == b"\x1f\x8b":
        try:
            return gzip.decompress(raw)
        except (OSError, EOFError) as e:
            raise DatasetFormatError(f"Archive gzip corrompue : {path} ({e})") from e
    return raw


def read_idx_images(path: Union[str, Path]) -> np.ndarray:
    data = _read_bytes(path)
    if len(data) < 16:
        raise DatasetFormatError(f"En-tête IDX tronqué : {path}.")
    magic, n, rows, cols = struct.unpack(">IIII", data[:16])
    if magic != IDX_IMAGES_MAGIC:
        raise DatasetFormatError(f"Magic IDX images invalide dans {path} : {magic:#010x}.")
    expected = n * rows * cols
    if len(data) - 16 != expected:
        raise DatasetFormatError(f"Longueur IDX incohérente dans {path} : {len(data) - 16} octets pour {expected}.")
    return np.frombuffer(data, dtype=np.uint8, offset=16).reshape(n, 1, rows, cols)


def read_idx_labels(path: Union[str, Path]) -> np.ndarray:
    data = _read_bytes(path)
    if len(data) < 8:
        raise DatasetFormatError(f"En-tête IDX tronqué : {path}.")
    magic, n = struct.unpack(">II", data[:8])
    if magic != IDX_LABELS_MAGIC:
        raise DatasetFormatError(f"Magic IDX étiquettes invalide dans {path} : {magic:#010x}.")
    if len(data) - 8 != n:
        raise DatasetFormatError(f"Longueur IDX incohérente dans {path} : {len(data) - 8} étiquettes pour {n}.")
    return np.frombuffer(data, dtype=np.uint8, offset=8)


def read_cifar_batch(path: Union[str, Path]):
    data = _read_bytes(path)
    if len(data) == 0 or len(data) % CIFAR_RECORD_BYTES:
        raise DatasetFormatError(
            f"Fichier CIFAR {path} : {len(data)} octets, pas un multiple de {CIFAR_RECORD_BYTES}."
        )
    records = np.frombuffer(data, dtype=np.uint8).reshape(-1, CIFAR_RECORD_BYTES)
    return records[:, 1:].reshape(-1, *CIFAR_SHAPE), records[:, 0]


def load_dataset(handle: DatasetHandle) -> LabeledImages:
    """Images en float dans [0, 1] puis normalisées canal par canal ; étiquettes en indices."""
    if handle.source_format is DatasetFormat.IDX:
        if handle.labels_path is None:
            raise DatasetFormatError(f"{handle.name}/{handle.split} : fichier d'étiquettes IDX manquant.")
        pixels = np.concatenate([read_idx_images(p) for p in handle.images_path])
        labels = read_idx_labels(handle.labels_path)
    else:
        parts = [read_cifar_batch(p) for p in handle.images_path]
        pixels = np.concatenate([p[0] for p in parts])
        labels = np.concatenate([p[1] for p in parts])

    if pixels.shape[0] != labels.shape[0]:
        raise DatasetFormatError(f"{pixels.shape[0]} images pour {labels.shape[0]} étiquettes ({handle.name}).")
    if tuple(pixels.shape[1:]) != tuple(handle.image_shape):
        raise DatasetFormatError(
            f"Forme d'image {tuple(pixels.shape[1:])} différente de la forme déclarée {tuple(handle.image_shape)}."
        )
    if labels.size and int(labels.max()) >= handle.num_classes:
        raise DatasetFormatError(f"Étiquette {int(labels.max())} >= K={handle.num_classes} dans {handle.name}.")

    images = torch.from_numpy(pixels.astype(np.float32) / 255.0)
    mean = torch.tensor(handle.mean, dtype=torch.float32).view(1, -1, 1, 1)
    std = torch.tensor(handle.std, dtype=torch.float32).view(1, -1, 1, 1)
    images = (images - mean) / std
    log.info("Dataset %s/%s chargé : %s", handle.name, handle.split, tuple(images.shape))
    return LabeledImages(images, torch.from_numpy(labels.astype(np.int64)), handle)


def handle_from_config(config: TrainConfig, split: str) -> Optional[DatasetHandle]:
    """Handle du split demandé à partir des chemins de la config, None si non renseignés."""
    images = config.train_images if split == "train" else config.test_images
    labels = config.train_labels if split == "train" else config.test_labels
    if not images:
        return None
    mean, std = config.normalization
    if config.dataset_format is DatasetFormat.CIFAR:
        shape = CIFAR_SHAPE
        name = "cifar"
    else:
        shape = (config.channels, config.base_resolution, config.base_resolution)
        name = "mnist"
    return DatasetHandle(name=name, split=split, source_format=config.dataset_format, image_shape=shape,
                         num_classes=config.num_classes, mean=mean, std=std,
                         images_path=images, labels_path=labels)


def default_handle(fmt: DatasetFormat, split: str, images_path, labels_path: Optional[str] = None,
                   num_classes: int = 10) -> DatasetHandle:
    mean, std = DEFAULT_NORMALIZATION[fmt]
    shape = CIFAR_SHAPE if fmt is DatasetFormat.CIFAR else (1, 28, 28)
    return DatasetHandle(name=fmt.value, split=split, source_format=fmt, image_shape=shape,
                         num_classes=num_classes, mean=list(mean), std=list(std),
                         images_path=images_path, labels_path=labels_path)
