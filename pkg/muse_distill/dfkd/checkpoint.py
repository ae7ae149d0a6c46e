# muse_distill/dfkd/checkpoint.py

"""
Checkpoint des réseaux : "MUSECKPT" | u32 nombre | répété (u16 longueur du nom,
nom, u8 rang, u32 dims..., float32 LE). Les métadonnées (NetworkSpec, précision
mesurée) vont dans un fichier JSON voisin `<chemin>.json`.
"""

import json
import struct
from pathlib import Path
from typing import Any, Dict, Optional, Tuple, Union

import numpy as np
import torch
from torch import nn

from muse_distill.core.exceptions import CheckpointFormatError
from muse_distill.core.logger import get_logger
from muse_distill.dfkd.models import ConvClassifier, build_network
from muse_distill.dfkd.schema import NetworkSpec

log = get_logger(__name__)

CHECKPOINT_MAGIC = b"MUSECKPT"


def save_tensors(tensors: Dict[str, torch.Tensor], path: Union[str, Path]) -> None:
    parts = [CHECKPOINT_MAGIC, struct.pack("<I", len(tensors))]
    for name, tensor in tensors.items():
        encoded = name.encode("utf-8")
        array = tensor.detach().cpu().numpy().astype("<f4")
        parts.append(struct.pack("<H", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack("<B", array.ndim))
        parts.append(struct.pack(f"<{array.ndim}I", *array.shape))
        parts.append(array.tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_tensors(path: Union[str, Path]) -> Dict[str, torch.Tensor]:
    data = Path(path).read_bytes()
    if data[:8] != CHECKPOINT_MAGIC:
        raise CheckpointFormatError(f"Magic invalide dans {path} : {data[:8]!r}.")
    tensors: Dict[str, torch.Tensor] = {}
    try:
        (count,) = struct.unpack_from("<I", data, 8)
        offset = 12
        for _ in range(count):
            (name_len,) = struct.unpack_from("<H", data, offset)
            offset += 2
            name = data[offset:offset + name_len].decode("utf-8")
            offset += name_len
            (rank,) = struct.unpack_from("<B", data, offset)
            offset += 1
            dims = struct.unpack_from(f"<{rank}I", data, offset)
            offset += 4 * rank
            n = int(np.prod(dims)) if rank else 1
            array = np.frombuffer(data, dtype="<f4", count=n, offset=offset).reshape(dims)
            offset += 4 * n
            tensors[name] = torch.from_numpy(array.astype(np.float32))
    except (struct.error, ValueError, UnicodeDecodeError) as e:
        raise CheckpointFormatError(f"Checkpoint tronqué ou corrompu : {path} ({e})") from e
    if offset != len(data):
        raise CheckpointFormatError(f"Octets excédentaires en fin de checkpoint : {path}.")
    return tensors


def save_checkpoint(model: ConvClassifier, path: Union[str, Path], meta: Optional[Dict[str, Any]] = None) -> None:
    """Écrit les tenseurs du modèle et le sidecar JSON (spec + métriques)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    save_tensors(model.state_dict(), path)
    sidecar = {"spec": model.spec.model_dump(mode="json"), "meta": meta or {}}
    Path(f"{path}.json").write_text(json.dumps(sidecar, indent=2, ensure_ascii=False), encoding="utf-8")
    log.info("Checkpoint enregistré : %s", path)


def load_checkpoint(path: Union[str, Path]) -> Tuple[ConvClassifier, Dict[str, Any]]:
    """Reconstruit le réseau depuis le sidecar puis charge les tenseurs (mode eval)."""
    sidecar_path = Path(f"{path}")
    sidecar_path = sidecar_path.with_name(sidecar_path.name + ".json")
    if not sidecar_path.exists():
        raise CheckpointFormatError(f"Sidecar manquant : {sidecar_path}.")
    sidecar = json.loads(sidecar_path.read_text(encoding="utf-8"))
    spec = NetworkSpec(**sidecar["spec"])
    model = build_network(spec, seed=0)
    load_into(model, path)
    model.eval()
    return model, sidecar.get("meta", {})


def load_into(module: nn.Module, path: Union[str, Path]) -> None:
    tensors = load_tensors(path)
    expected = module.state_dict()
    missing = sorted(set(expected) - set(tensors))
    unexpected = sorted(set(tensors) - set(expected))
    if missing or unexpected:
        raise CheckpointFormatError(f"Checkpoint incompatible : manquants={missing}, inattendus={unexpected}.")
    for name, tensor in tensors.items():
        if tuple(tensor.shape) != tuple(expected[name].shape):
            raise CheckpointFormatError(
                f"Forme incompatible pour {name} : {tuple(tensor.shape)} au lieu de {tuple(expected[name].shape)}."
            )
    module.load_state_dict({k: v.to(expected[k].dtype) for k, v in tensors.items()})
