# muse_distill/dfkd/losses.py

"""
Termes de perte : distillation KL, entropie croisée, terme adversarial,
alignement BN, CAM (latent + masque cible), bornes du jeu d'embeddings,
et les deux pertes totales (générateur / étudiant).

Convention de réduction : moyenne sur le batch et sur les éléments
spatiaux / vectoriels, sauf bn_reg_loss qui somme sur couches et canaux.
"""

from dataclasses import dataclass
from typing import Callable, NamedTuple, Optional, Sequence, Tuple, Union

import torch
import torch.nn.functional as F

from muse_distill.core.exceptions import GradientError, ShapeError
from muse_distill.dfkd.diffcore import BatchNormState
from muse_distill.dfkd.models import ClassEmbeddingTable, ConvClassifier, bn_capture
from muse_distill.dfkd.pool import SyntheticBatch
from muse_distill.dfkd.schema import AedEmbedding, LossWeights, MaskKind

Projection = Optional[Callable[[torch.Tensor], torch.Tensor]]


def _same_shape(a: torch.Tensor, b: torch.Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{what}: formes incompatibles {tuple(a.shape)} et {tuple(b.shape)}.")


# ---------------- Termes de base ----------------

def kd_kl_loss(teacher_logits: torch.Tensor, student_logits: torch.Tensor) -> torch.Tensor:
    """Moyenne sur le batch de KL(softmax(professeur) ‖ softmax(étudiant))."""
    _same_shape(teacher_logits, student_logits, "kd_kl_loss")
    return F.kl_div(F.log_softmax(student_logits, dim=1), F.log_softmax(teacher_logits, dim=1),
                    reduction="batchmean", log_target=True)


def ce_loss(teacher_logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Entropie croisée moyenne du professeur contre les pseudo-étiquettes."""
    num_classes = teacher_logits.shape[1]
    if labels.numel() and (int(labels.min()) < 0 or int(labels.max()) >= num_classes):
        raise ValueError(f"Étiquette hors de [0, {num_classes}) dans ce_loss.")
    return F.cross_entropy(teacher_logits, labels)


def adv_loss(teacher_logits: torch.Tensor, student_logits: torch.Tensor) -> torch.Tensor:
    """-KL : le générateur maximise le désaccord professeur / étudiant en minimisant ce terme."""
    return -kd_kl_loss(teacher_logits, student_logits)


def bn_reg_loss(teacher_bn_states: Sequence[BatchNormState]) -> torch.Tensor:
    """Σ couches ( ||μ_batch − μ_courant||² + ||σ²_batch − σ²_courant||² )."""
    if not teacher_bn_states:
        raise GradientError("bn_reg_loss: aucune couche BN fournie.")
    total = None
    for state in teacher_bn_states:
        if state.last_batch_mean is None or state.last_batch_var is None:
            raise GradientError("bn_reg_loss: stats de batch non capturées pour une couche BN.")
        term = ((state.last_batch_mean - state.running_mean) ** 2).sum() \
            + ((state.last_batch_var - state.running_var) ** 2).sum()
        total = term if total is None else total + term
    return total


# ---------------- CAM et masque cible ----------------

def cam_from_features(feature_maps: torch.Tensor, head_weight: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """M = Σ_k w_k^ŷ · T_k, sans normalisation ni interpolation. (B, h, w)"""
    if feature_maps.shape[1] != head_weight.shape[1]:
        raise ShapeError(f"CAM: {feature_maps.shape[1]} cartes pour une tête de largeur {head_weight.shape[1]}.")
    return torch.einsum("bk,bkhw->bhw", head_weight[labels], feature_maps)


def cam_latent(teacher: ConvClassifier, x: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    if teacher.embed is not None:
        raise ShapeError("cam_latent: la tête du professeur n'est pas une application linéaire unique après le GAP.")
    maps = teacher.forward_all(x).feature_maps
    return cam_from_features(maps, teacher.head.weight, labels)


@dataclass
class TargetMask:
    kind: MaskKind
    params: Tuple[float, ...]
    values: torch.Tensor            # (h_m, w_m)

    @property
    def size(self) -> Tuple[int, int]:
        return tuple(self.values.shape)


def build_target_mask(kind: Union[MaskKind, str], params: Sequence[float],
                      size: Union[int, Tuple[int, int]]) -> TargetMask:
    """
    Full(n) : matrice remplie de n.
    Gaussian(i, j) : i·exp(−d²/(2j²)), d distance au centre (éventuellement demi-entier).
    """
    kind = MaskKind(kind)
    h, w = (size, size) if isinstance(size, int) else size
    if h <= 0 or w <= 0:
        raise ValueError(f"Taille de masque invalide : {h}x{w}.")
    params = tuple(float(p) for p in params)
    if kind is MaskKind.FULL:
        if len(params) != 1:
            raise ValueError("Full(n) attend un seul paramètre n.")
        values = torch.full((h, w), params[0], dtype=torch.float64)
    else:
        if len(params) != 2:
            raise ValueError("Gaussian(i, j) attend deux paramètres (pic, écart-type).")
        peak, sigma = params
        if sigma <= 0:
            raise ValueError(f"Écart-type invalide : {sigma} (doit être > 0).")
        rows = torch.arange(h, dtype=torch.float64) - (h - 1) / 2.0
        cols = torch.arange(w, dtype=torch.float64) - (w - 1) / 2.0
        d2 = rows[:, None] ** 2 + cols[None, :] ** 2
        values = peak * torch.exp(-d2 / (2.0 * sigma * sigma))
    return TargetMask(kind=kind, params=params, values=values)


def cam_loss(cam: torch.Tensor, mask: TargetMask) -> torch.Tensor:
    """Moyenne de max(0, M_target − M) sur batch et positions."""
    if tuple(cam.shape[-2:]) != mask.size:
        raise ShapeError(f"cam_loss: CAM {tuple(cam.shape[-2:])} pour un masque {mask.size}.")
    return F.relu(mask.values.to(cam.dtype) - cam).mean()


# ---------------- Jeu d'embeddings (bornes intérieure / extérieure) ----------------

def _per_sample_mse(f: torch.Tensor, f_y: torch.Tensor) -> torch.Tensor:
    _same_shape(f, f_y, "MSE d'embedding")
    return ((f - f_y) ** 2).mean(dim=1)


def bounding_loss_ed(f_s: torch.Tensor, f_y: torch.Tensor, r_i: float) -> torch.Tensor:
    """Moyenne de max(0, MSE(f̂_S, f_y) − r_i) : ramène les anciennes données dans le rayon intérieur."""
    return F.relu(_per_sample_mse(f_s, f_y) - r_i).mean()


def margin_loss_aed(f: torch.Tensor, f_y: torch.Tensor, r_o: float) -> torch.Tensor:
    """Moyenne de max(0, r_o − MSE(f̂, f_y)) : pousse les nouvelles données au-delà du rayon extérieur."""
    return F.relu(r_o - _per_sample_mse(f, f_y)).mean()


# ---------------- Pertes totales ----------------

class GeneratorLossTerms(NamedTuple):
    total: torch.Tensor
    ce: torch.Tensor
    adv: torch.Tensor
    bn: torch.Tensor
    cam: torch.Tensor
    aed: torch.Tensor


class StudentLossTerms(NamedTuple):
    total: torch.Tensor
    kl: torch.Tensor
    ed: torch.Tensor


def _project(f: torch.Tensor, projection: Projection, dim: int) -> torch.Tensor:
    if projection is not None:
        f = projection(f)
    if f.shape[-1] != dim:
        raise ShapeError(f"Embedding de largeur {f.shape[-1]} après projection, {dim} attendue.")
    return f


def generator_total_loss(batch: SyntheticBatch, teacher: ConvClassifier, student: ConvClassifier,
                         table: ClassEmbeddingTable, weights: LossWeights, mask: TargetMask,
                         projection: Projection = None,
                         aed_embedding: AedEmbedding = AedEmbedding.STUDENT) -> GeneratorLossTerms:
    """
    L_G = α_ce·L_ce − α_adv·KL + α_bn·L_bn + α_cam·L_cam + α_aed·L_aed.
    Le professeur tourne en mode capture (stats courantes intactes) ; l'étudiant
    est laissé dans le mode choisi par l'appelant (eval pendant la phase générateur).
    """
    x, y = batch.images, batch.labels
    if teacher.embed is not None:
        raise ShapeError("Le professeur doit finir par GAP + une seule tête linéaire (CAM exacte).")
    with bn_capture(teacher):
        t_out = teacher.forward_all(x)
        bn = bn_reg_loss(teacher.bn_states())
    s_out = student.forward_all(x)

    ce = ce_loss(t_out.logits, y)
    adv = adv_loss(t_out.logits, s_out.logits)
    cam = cam_loss(cam_from_features(t_out.feature_maps, teacher.head.weight, y), mask)
    source = s_out.embedding if AedEmbedding(aed_embedding) is AedEmbedding.STUDENT else t_out.embedding
    f_y = table.lookup(y).to(x.dtype)
    aed = margin_loss_aed(_project(source, projection, table.dim), f_y, weights.r_o)

    total = (weights.alpha_ce * ce + weights.alpha_adv * adv + weights.alpha_bn * bn
             + weights.alpha_cam * cam + weights.alpha_aed * aed)
    return GeneratorLossTerms(total, ce, adv, bn, cam, aed)


def student_total_loss(batch: SyntheticBatch, teacher: ConvClassifier, student: ConvClassifier,
                       table: ClassEmbeddingTable, weights: LossWeights,
                       projection: Projection = None) -> StudentLossTerms:
    """L_S = L_kl + α_ed·L_ed ; le professeur est évalué sans gradient."""
    x, y = batch.images, batch.labels
    with torch.no_grad():
        t_logits = teacher(x)
    s_out = student.forward_all(x)
    kl = kd_kl_loss(t_logits, s_out.logits)
    f_y = table.lookup(y).to(x.dtype)
    ed = bounding_loss_ed(_project(s_out.embedding, projection, table.dim), f_y, weights.r_i)
    return StudentLossTerms(kl + weights.alpha_ed * ed, kl, ed)
