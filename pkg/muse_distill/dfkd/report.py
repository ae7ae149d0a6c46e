# muse_distill/dfkd/report.py

"""
Sorties d'un run : lignes de métriques (CSV à en-tête fixe), images PPM/PGM
et grille texte des masques cibles.
"""

import csv
from pathlib import Path
from typing import Iterable, Literal, Optional, Union

import numpy as np
import torch
from pydantic import BaseModel

from muse_distill.core.logger import get_logger

log = get_logger(__name__)

METRICS_HEADER = (
    "epoch", "phase", "loss_ce", "loss_adv", "loss_bn", "loss_cam", "loss_aed",
    "loss_kl", "loss_ed", "pool_units", "top1", "top5", "wall_seconds",
)


class MetricsRow(BaseModel):
    """Une ligne du CSV de métriques ; les colonnes sans objet restent vides."""
    epoch: int
    phase: Literal["generator", "student", "eval"]
    loss_ce: Optional[float] = None
    loss_adv: Optional[float] = None
    loss_bn: Optional[float] = None
    loss_cam: Optional[float] = None
    loss_aed: Optional[float] = None
    loss_kl: Optional[float] = None
    loss_ed: Optional[float] = None
    pool_units: Optional[float] = None
    top1: Optional[float] = None
    top5: Optional[float] = None
    wall_seconds: Optional[float] = None

    def as_csv_cells(self) -> list:
        cells = []
        for name in METRICS_HEADER:
            value = getattr(self, name)
            if value is None:
                cells.append("")
            elif isinstance(value, float):
                cells.append(f"{value:.6f}")
            else:
                cells.append(str(value))
        return cells


def write_metrics_csv(rows: Iterable[MetricsRow], path: Union[str, Path]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(METRICS_HEADER)
        for row in rows:
            writer.writerow(row.as_csv_cells())


def read_metrics_csv(path: Union[str, Path]) -> list:
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.DictReader(f)
        if tuple(reader.fieldnames or ()) != METRICS_HEADER:
            raise ValueError(f"En-tête de métriques inattendu dans {path} : {reader.fieldnames}.")
        return [
            MetricsRow(**{k: (v if v != "" else None) for k, v in record.items()})
            for record in reader
        ]


# ---------------- Images ----------------

def scale_to_bytes(image: torch.Tensor) -> np.ndarray:
    """Mise à l'échelle min-max par image vers 0..255 ; une image constante devient gris moyen (128)."""
    array = image.detach().to(torch.float64).cpu().numpy()
    lo, hi = float(array.min()), float(array.max())
    if hi - lo <= 0.0:
        return np.full(array.shape, 128, dtype=np.uint8)
    return np.round((array - lo) / (hi - lo) * 255.0).astype(np.uint8)


def write_ppm(image: torch.Tensor, path: Union[str, Path]) -> None:
    """P6 binaire ; les images à un canal sont répliquées sur RGB."""
    if image.dim() != 3:
        raise ValueError(f"Image (C, H, W) attendue, reçu {tuple(image.shape)}.")
    pixels = scale_to_bytes(image)
    if pixels.shape[0] == 1:
        pixels = np.repeat(pixels, 3, axis=0)
    elif pixels.shape[0] != 3:
        raise ValueError(f"PPM : 1 ou 3 canaux attendus, {pixels.shape[0]} reçus.")
    _, h, w = pixels.shape
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(np.ascontiguousarray(pixels.transpose(1, 2, 0)).tobytes())


def write_pgm(values: torch.Tensor, path: Union[str, Path]) -> None:
    """P5 binaire d'une matrice 2D, valeurs ramenées linéairement sur 0..255."""
    if values.dim() != 2:
        raise ValueError(f"Matrice 2D attendue, reçu {tuple(values.shape)}.")
    pixels = scale_to_bytes(values)
    h, w = pixels.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(pixels.tobytes())


def format_mask_grid(values: torch.Tensor) -> str:
    """Une ligne par rangée, valeurs séparées par des espaces (repr Python des float)."""
    return "\n".join(" ".join(repr(float(v)) for v in row) for row in values.tolist()) + "\n"


def dump_image_name(index: int, label: int, resolution: int) -> str:
    return f"img_{index}_y{label}_e{resolution}.ppm"
