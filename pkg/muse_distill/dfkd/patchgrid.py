# muse_distill/dfkd/patchgrid.py

"""
Calcul de grille de patchs pour les modèles à patchs en basse résolution :
comptage, loi des centres biaisée vers le milieu, extraction de la sous-grille
d'embeddings de position.
"""

from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
import torch

from muse_distill.core.exceptions import PatchGridError
from muse_distill.dfkd.schema import PatchGridSpec


def patch_count(h: int, w: int, p: int) -> int:
    """(H/P)·(W/P)"""
    if p <= 0 or h <= 0 or w <= 0:
        raise PatchGridError(f"Dimensions invalides : H={h}, W={w}, P={p}.")
    if h % p or w % p:
        raise PatchGridError(f"Le patch {p} ne divise pas l'image {h}x{w}.")
    return (h // p) * (w // p)


def _axis_bounds(window: int) -> Tuple[int, int]:
    """Demi-largeurs (bas, haut) ; pour W pair la cellule supplémentaire va côté indices hauts."""
    return (window - 1) // 2, window // 2


def valid_centers(spec: PatchGridSpec) -> np.ndarray:
    """Centres (r, c) pour lesquels la fenêtre tient entièrement dans la grille."""
    lo_r, hi_r = _axis_bounds(spec.window_rows)
    lo_c, hi_c = _axis_bounds(spec.window_cols)
    rows = np.arange(lo_r, spec.grid_rows - hi_r)
    cols = np.arange(lo_c, spec.grid_cols - hi_c)
    rr, cc = np.meshgrid(rows, cols, indexing="ij")
    return np.stack([rr.ravel(), cc.ravel()], axis=1)


@dataclass
class CenterPMF:
    centers: np.ndarray         # (n, 2) indices (ligne, colonne)
    probs: np.ndarray           # (n,) somme = 1

    def prob_of(self, r: int, c: int) -> float:
        hit = np.flatnonzero((self.centers[:, 0] == r) & (self.centers[:, 1] == c))
        return float(self.probs[hit[0]]) if hit.size else 0.0


def center_index_pmf(spec: PatchGridSpec) -> CenterPMF:
    """P(r, c) ∝ 1 / (1 + λ·(|r − a_r|² + |c − a_c|²)) sur les centres valides."""
    centers = valid_centers(spec)
    if centers.size == 0:
        raise PatchGridError("Aucun centre valide pour cette fenêtre.")
    d2 = (centers[:, 0] - spec.anchor_row) ** 2 + (centers[:, 1] - spec.anchor_col) ** 2
    weights = 1.0 / (1.0 + spec.bias * d2.astype(np.float64))
    return CenterPMF(centers=centers, probs=weights / weights.sum())


def sample_center(pmf: CenterPMF, rng: np.random.Generator) -> Tuple[int, int]:
    idx = int(rng.choice(len(pmf.probs), p=pmf.probs))
    r, c = pmf.centers[idx]
    return int(r), int(c)


def crop_position_embeddings(full_pos: torch.Tensor, center: Tuple[int, int], spec: PatchGridSpec,
                             cls_token: Optional[torch.Tensor] = None):
    """
    Sous-grille contiguë (W_r, W_c, d) de la grille (G_r, G_c, d) autour de `center`.
    Le jeton de classe, s'il est fourni, est renvoyé tel quel.
    """
    if full_pos.dim() != 3 or tuple(full_pos.shape[:2]) != (spec.grid_rows, spec.grid_cols):
        raise PatchGridError(
            f"Grille de position de forme {tuple(full_pos.shape)}, attendu ({spec.grid_rows}, {spec.grid_cols}, d)."
        )
    r, c = center
    lo_r, hi_r = _axis_bounds(spec.window_rows)
    lo_c, hi_c = _axis_bounds(spec.window_cols)
    r0, r1, c0, c1 = r - lo_r, r + hi_r, c - lo_c, c + hi_c
    if r0 < 0 or c0 < 0 or r1 >= spec.grid_rows or c1 >= spec.grid_cols:
        raise PatchGridError(f"Fenêtre centrée en {center} hors de la grille {spec.grid_rows}x{spec.grid_cols}.")
    crop = full_pos[r0:r1 + 1, c0:c1 + 1]
    if cls_token is None:
        return crop
    return crop, cls_token
