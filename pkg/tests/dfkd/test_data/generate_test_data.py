"""
Jeux de données de test : table d'embeddings de référence (distance minimale 0.03)
et petits fichiers IDX / CIFAR binaires écrits à la volée.

    python tests/dfkd/test_data/generate_test_data.py tests/dfkd/test_data/reference_embeddings.bin
"""

import gzip
import math
import struct
import sys
from pathlib import Path

import numpy as np
import torch

from muse_distill.dfkd.models import ClassEmbeddingTable, save_embedding_table
from muse_distill.dfkd.schema import EmbeddingSource

REFERENCE_CLASSES = 10
REFERENCE_DIM = 10
REFERENCE_MIN_DIST = 0.03


def reference_embedding_table() -> ClassEmbeddingTable:
    """f_k = √0.15 · e_k : deux coordonnées diffèrent de √0.15, MSE = 2·0.15/10 = 0.03."""
    rows = math.sqrt(0.15) * torch.eye(REFERENCE_CLASSES, REFERENCE_DIM)
    return ClassEmbeddingTable(rows, EmbeddingSource.FILE)


def write_reference_embeddings(path) -> Path:
    save_embedding_table(reference_embedding_table(), path)
    return Path(path)


def write_idx_images(path, pixels: np.ndarray, compress: bool = False) -> Path:
    n, rows, cols = pixels.shape
    payload = struct.pack(">IIII", 0x00000803, n, rows, cols) + pixels.astype(np.uint8).tobytes()
    Path(path).write_bytes(gzip.compress(payload) if compress else payload)
    return Path(path)


def write_idx_labels(path, labels: np.ndarray, compress: bool = False) -> Path:
    payload = struct.pack(">II", 0x00000801, len(labels)) + labels.astype(np.uint8).tobytes()
    Path(path).write_bytes(gzip.compress(payload) if compress else payload)
    return Path(path)


def write_cifar_batch(path, pixels: np.ndarray, labels: np.ndarray) -> Path:
    """pixels (N, 3, 32, 32) uint8 ; un enregistrement = 1 octet d'étiquette + 3072 octets."""
    records = np.concatenate([labels.astype(np.uint8)[:, None], pixels.reshape(len(labels), -1)], axis=1)
    Path(path).write_bytes(records.astype(np.uint8).tobytes())
    return Path(path)


if __name__ == "__main__":
    out = sys.argv[1] if len(sys.argv) > 1 else "./tests/dfkd/test_data/reference_embeddings.bin"
    write_reference_embeddings(out)
    print(f"✅ Saved {out}")
