# muse_distill/dfkd/diffcore.py

"""
Jeu d'opérateurs différentiables sur lequel reposent tous les modèles et pertes.

Le tenseur est le `torch.Tensor` (autograd en mode inverse) ; ce module fixe le
contrat autour de lui :
 - apply_operator(kind, params, x)     dispatch contrôlé (formes, valeurs finies)
 - backward(loss)                      rétropropagation d'un scalaire fini
 - spectral_normalize(weight, state)   normalisation spectrale par itération de puissance
 - grad_check(f, point, eps)           vérification par différences finies centrées
"""

from dataclasses import dataclass
from enum import Enum
from typing import Callable, Iterable, Optional, Union

import torch
import torch.nn.functional as F
from torch import nn

from muse_distill.core.exceptions import GradientError, NonFiniteError, ShapeError
from muse_distill.core.logger import get_logger

log = get_logger(__name__)

TRAIN_DTYPE = torch.float32
CHECK_DTYPE = torch.float64

LEAKY_SLOPE = 0.2


class OperatorKind(str, Enum):
    CONV2D = "conv2d"
    LINEAR = "linear"
    BATCHNORM2D = "batchnorm2d"
    BATCHNORM1D = "batchnorm1d"
    LEAKY_RELU = "leaky_relu"
    SIGMOID = "sigmoid"
    RELU = "relu"
    UPSAMPLE_NEAREST_2X = "upsample_nearest_2x"
    GLOBAL_AVG_POOL = "global_avg_pool"
    MAX_POOL2X = "max_pool2x"
    SOFTMAX = "softmax_over_classes"
    LOG_SOFTMAX = "log_softmax_over_classes"


class NormMode(str, Enum):
    """
    TRAIN   : normalise avec les stats du batch, met à jour les stats courantes.
    EVAL    : normalise avec les stats courantes, n'enregistre rien.
    CAPTURE : normalise avec les stats courantes, enregistre les stats du batch
              (graphe conservé) sans toucher aux stats courantes.
    """
    TRAIN = "train"
    EVAL = "eval"
    CAPTURE = "capture"


# ---------------- États des opérateurs ----------------

@dataclass
class LinearParams:
    weight: torch.Tensor            # (out, in)
    bias: Optional[torch.Tensor] = None


@dataclass
class ConvParams:
    weight: torch.Tensor            # (out, in, 3, 3)
    bias: Optional[torch.Tensor] = None


class BatchNormState(nn.Module):
    """
    État d'une couche de batchnorm (1D ou 2D) : gamma/beta apprenables,
    stats courantes, et stats du dernier batch vu en mode TRAIN ou CAPTURE.
    La variance est toujours la variance biaisée (population).
    """

    def __init__(self, num_features: int, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        if not (0.0 < momentum <= 1.0):
            raise ValueError(f"Momentum invalide : {momentum} (doit être dans (0, 1]).")
        if eps < 0:
            raise ValueError(f"Epsilon invalide : {eps} (doit être >= 0).")
        self.num_features = num_features
        self.momentum = momentum
        self.eps = eps
        self.gamma = nn.Parameter(torch.ones(num_features))
        self.beta = nn.Parameter(torch.zeros(num_features))
        self.register_buffer("running_mean", torch.zeros(num_features))
        self.register_buffer("running_var", torch.ones(num_features))
        self.last_batch_mean: Optional[torch.Tensor] = None
        self.last_batch_var: Optional[torch.Tensor] = None
        self.capture = False

    @property
    def mode(self) -> NormMode:
        if self.capture:
            return NormMode.CAPTURE
        return NormMode.TRAIN if self.training else NormMode.EVAL

    def reset_parameters(self) -> None:
        with torch.no_grad():
            self.gamma.fill_(1.0)
            self.beta.zero_()
            self.running_mean.zero_()
            self.running_var.fill_(1.0)
        self.last_batch_mean = None
        self.last_batch_var = None

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        kind = OperatorKind.BATCHNORM2D if x.dim() == 4 else OperatorKind.BATCHNORM1D
        return apply_operator(kind, self, x)

    def extra_repr(self) -> str:
        return f"{self.num_features}, momentum={self.momentum}, eps={self.eps}"


class SpectralNormState(nn.Module):
    """Vecteur singulier gauche u (norme 1) persistant entre les pas."""

    def __init__(self, out_features: int, power_iters: int = 1,
                 generator: Optional[torch.Generator] = None):
        super().__init__()
        if power_iters < 1:
            raise ValueError(f"power_iters invalide : {power_iters} (doit être >= 1).")
        self.power_iters = power_iters
        u = torch.randn(out_features, generator=generator)
        self.register_buffer("u", u / u.norm().clamp_min(1e-12))


OperatorParams = Union[LinearParams, ConvParams, BatchNormState, None]


# ---------------- Contrôles ----------------

def check_finite(t: torch.Tensor, where: str) -> torch.Tensor:
    if not bool(torch.isfinite(t).all()):
        raise NonFiniteError(f"Valeur non finie détectée ({where}), forme={tuple(t.shape)}.")
    return t


def _expect_dim(x: torch.Tensor, dim: int, kind: OperatorKind) -> None:
    if x.dim() != dim:
        raise ShapeError(f"{kind.value} attend un tenseur de rang {dim}, reçu {tuple(x.shape)}.")


# ---------------- Opérateurs ----------------

def _batchnorm(state: BatchNormState, x: torch.Tensor, kind: OperatorKind) -> torch.Tensor:
    if kind is OperatorKind.BATCHNORM2D:
        _expect_dim(x, 4, kind)
        dims, view = (0, 2, 3), (1, -1, 1, 1)
    else:
        _expect_dim(x, 2, kind)
        dims, view = (0,), (1, -1)
    if x.shape[1] != state.num_features:
        raise ShapeError(f"{kind.value}: {x.shape[1]} canaux pour {state.num_features} attendus.")

    mode = state.mode
    if mode is NormMode.TRAIN:
        if x.shape[0] == 1:
            raise ShapeError(f"{kind.value}: batch de taille 1 en mode entraînement (variance dégénérée).")
        mean = x.mean(dim=dims)
        var = x.var(dim=dims, unbiased=False)
        m = state.momentum
        with torch.no_grad():
            state.running_mean.copy_((1.0 - m) * state.running_mean + m * mean.detach())
            state.running_var.copy_((1.0 - m) * state.running_var + m * var.detach())
        state.last_batch_mean = mean.detach()
        state.last_batch_var = var.detach()
        norm_mean, norm_var = mean, var
    else:
        if mode is NormMode.CAPTURE:
            # stats du batch gardées dans le graphe pour la perte L_bn
            state.last_batch_mean = x.mean(dim=dims)
            state.last_batch_var = x.var(dim=dims, unbiased=False)
        norm_mean, norm_var = state.running_mean, state.running_var

    x_hat = (x - norm_mean.view(view)) / torch.sqrt(norm_var.view(view) + state.eps)
    return x_hat * state.gamma.view(view) + state.beta.view(view)


def apply_operator(kind: OperatorKind, params: OperatorParams, x: torch.Tensor) -> torch.Tensor:
    """
    Applique un opérateur de la liste fermée OperatorKind.
    :param kind: type d'opérateur
    :param params: LinearParams / ConvParams / BatchNormState, None pour les opérateurs sans état
    :param x: entrée
    :return: sortie selon la règle de forme de l'opérateur
    """
    kind = OperatorKind(kind)
    check_finite(x, kind.value)

    if kind is OperatorKind.CONV2D:
        _expect_dim(x, 4, kind)
        if params.weight.shape[1] != x.shape[1] or tuple(params.weight.shape[2:]) != (3, 3):
            raise ShapeError(f"conv2d: poids {tuple(params.weight.shape)} incompatible avec {tuple(x.shape)}.")
        out = F.conv2d(x, params.weight, params.bias, stride=1, padding=1)
    elif kind is OperatorKind.LINEAR:
        _expect_dim(x, 2, kind)
        if params.weight.shape[1] != x.shape[1]:
            raise ShapeError(f"linear: poids {tuple(params.weight.shape)} incompatible avec {tuple(x.shape)}.")
        out = F.linear(x, params.weight, params.bias)
    elif kind in (OperatorKind.BATCHNORM2D, OperatorKind.BATCHNORM1D):
        out = _batchnorm(params, x, kind)
    elif kind is OperatorKind.LEAKY_RELU:
        out = F.leaky_relu(x, LEAKY_SLOPE)
    elif kind is OperatorKind.SIGMOID:
        out = torch.sigmoid(x)
    elif kind is OperatorKind.RELU:
        out = F.relu(x)
    elif kind is OperatorKind.UPSAMPLE_NEAREST_2X:
        _expect_dim(x, 4, kind)
        out = F.interpolate(x, scale_factor=2, mode="nearest")
    elif kind is OperatorKind.GLOBAL_AVG_POOL:
        _expect_dim(x, 4, kind)
        out = x.mean(dim=(2, 3))
    elif kind is OperatorKind.MAX_POOL2X:
        _expect_dim(x, 4, kind)
        if x.shape[2] < 2 or x.shape[3] < 2:
            raise ShapeError(f"max_pool2x: carte trop petite {tuple(x.shape)}.")
        out = F.max_pool2d(x, kernel_size=2, stride=2)
    elif kind is OperatorKind.SOFTMAX:
        _expect_dim(x, 2, kind)
        out = F.softmax(x, dim=1)
    elif kind is OperatorKind.LOG_SOFTMAX:
        _expect_dim(x, 2, kind)
        out = F.log_softmax(x, dim=1)
    else:  # pragma: no cover
        raise ShapeError(f"Opérateur inconnu : {kind}")

    return check_finite(out, kind.value)


# ---------------- Gradients ----------------

def backward(loss: torch.Tensor, retain_graph: bool = False) -> None:
    """
    Rétropropage une perte scalaire. Les gradients s'accumulent d'un appel à l'autre :
    c'est à l'appelant (le trainer) de les remettre à zéro entre deux pas.
    """
    if loss.numel() != 1:
        raise GradientError(f"La perte doit être scalaire, reçu forme {tuple(loss.shape)}.")
    check_finite(loss.detach(), "loss")
    if not loss.requires_grad:
        raise GradientError("La perte ne dépend d'aucun paramètre entraînable.")
    loss.backward(retain_graph=retain_graph)


def zero_grad(params: Iterable[torch.Tensor]) -> None:
    for p in params:
        p.grad = None


def spectral_normalize(weight: torch.Tensor, state: SpectralNormState, update: bool = True) -> torch.Tensor:
    """
    Retourne weight / σ̂, σ̂ estimée par itération de puissance sur la matrice
    (out, reste). u est mis à jour en place si `update` ; le gradient traverse σ̂.
    Si σ̂ = 0, NonFiniteError est levée et u reste inchangé.
    """
    mat = weight.reshape(weight.shape[0], -1)
    if state.u.numel() != mat.shape[0]:
        raise ShapeError(f"spectral_normalize: u de taille {state.u.numel()} pour {mat.shape[0]} lignes.")

    with torch.no_grad():
        w = mat.detach()
        u = state.u.to(w.dtype)
        v = F.normalize(w.t() @ u, dim=0, eps=1e-12)
        if update:
            for _ in range(state.power_iters):
                u = F.normalize(w @ v, dim=0, eps=1e-12)
                v = F.normalize(w.t() @ u, dim=0, eps=1e-12)

    sigma = torch.dot(u, mat @ v)
    if float(sigma.detach().abs()) < 1e-12:
        raise NonFiniteError("Normalisation spectrale impossible : matrice de poids nulle (σ̂ = 0).")
    if update:
        with torch.no_grad():
            state.u.copy_(u.to(state.u.dtype))
    return weight / sigma


def grad_check(f: Callable[[torch.Tensor], torch.Tensor], point: torch.Tensor, eps: float = 1e-5) -> float:
    """
    Erreur relative maximale entre gradient analytique et différences finies centrées :
    max_i |g_i - n_i| / max(1, |g_i|), évaluée en 64 bits.
    """
    x = point.detach().to(CHECK_DTYPE).clone().requires_grad_(True)
    value = f(x)
    if value.numel() != 1:
        raise GradientError("grad_check: la fonction doit retourner un scalaire.")
    check_finite(value.detach(), "grad_check")
    (analytic,) = torch.autograd.grad(value, x, allow_unused=True)
    if analytic is None:
        analytic = torch.zeros_like(x)

    flat = x.detach().clone().reshape(-1)
    numeric = torch.zeros_like(flat)
    with torch.no_grad():
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + eps
            f_plus = f(flat.view_as(x).clone())
            flat[i] = orig - eps
            f_minus = f(flat.view_as(x).clone())
            flat[i] = orig
            check_finite(f_plus, "grad_check(+eps)")
            check_finite(f_minus, "grad_check(-eps)")
            numeric[i] = (f_plus - f_minus) / (2.0 * eps)

    a = analytic.detach().reshape(-1)
    err = (a - numeric).abs() / torch.clamp(a.abs(), min=1.0)
    max_err = float(err.max()) if err.numel() else 0.0
    log.debug("grad_check: %d coordonnées, erreur max=%.3e", flat.numel(), max_err)
    return max_err
