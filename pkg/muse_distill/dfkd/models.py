# muse_distill/dfkd/models.py

"""
Construction et état des réseaux : générateur G, couche bruitée Z,
classifieurs professeur/étudiant, table des embeddings de classe f_y.
"""

import math
import struct
from contextlib import contextmanager
from dataclasses import dataclass
from itertools import combinations
from pathlib import Path
from typing import Iterator, List, NamedTuple, Optional, Tuple, Union

import numpy as np
import torch
from torch import nn

from muse_distill.core.exceptions import EmbeddingFormatError, ShapeError
from muse_distill.core.logger import get_logger
from muse_distill.core.utils import torch_generator
from muse_distill.dfkd.diffcore import (
    BatchNormState, ConvParams, LinearParams, OperatorKind, SpectralNormState,
    apply_operator, check_finite, spectral_normalize,
)
from muse_distill.dfkd.pool import SyntheticBatch
from muse_distill.dfkd.schema import EmbeddingSource, GeneratorSpec, NetworkSpec

log = get_logger(__name__)

EMBEDDING_MAGIC = b"MUSEEMB1"


# ---------------- Couches élémentaires ----------------

def _uniform_(tensor: torch.Tensor, fan_in: int, generator: torch.Generator) -> None:
    bound = 1.0 / math.sqrt(fan_in)
    with torch.no_grad():
        tensor.copy_(torch.rand(tensor.shape, generator=generator) * 2.0 * bound - bound)


class Linear(nn.Module):
    def __init__(self, in_features: int, out_features: int, generator: torch.Generator):
        super().__init__()
        self.in_features = in_features
        self.out_features = out_features
        self.weight = nn.Parameter(torch.empty(out_features, in_features))
        self.bias = nn.Parameter(torch.empty(out_features))
        self.reset_parameters(generator)

    def reset_parameters(self, generator: torch.Generator) -> None:
        _uniform_(self.weight, self.in_features, generator)
        _uniform_(self.bias, self.in_features, generator)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return apply_operator(OperatorKind.LINEAR, LinearParams(self.weight, self.bias), x)


class Conv3x3(nn.Module):
    """Convolution 3x3, stride 1, padding 1 ; normalisation spectrale optionnelle."""

    def __init__(self, in_channels: int, out_channels: int, generator: torch.Generator,
                 spectral: bool = False, power_iters: int = 1):
        super().__init__()
        fan_in = in_channels * 9
        self.weight = nn.Parameter(torch.empty(out_channels, in_channels, 3, 3))
        self.bias = nn.Parameter(torch.empty(out_channels))
        _uniform_(self.weight, fan_in, generator)
        _uniform_(self.bias, fan_in, generator)
        self.sn = SpectralNormState(out_channels, power_iters, generator) if spectral else None

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        weight = self.weight
        if self.sn is not None:
            # u n'avance qu'en mode entraînement : l'évaluation reste une fonction pure
            weight = spectral_normalize(weight, self.sn, update=self.training)
        return apply_operator(OperatorKind.CONV2D, ConvParams(weight, self.bias), x)


class Op(nn.Module):
    """Opérateur sans état (activation, upsample, pooling)."""

    def __init__(self, kind: OperatorKind):
        super().__init__()
        self.kind = kind

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return apply_operator(self.kind, None, x)

    def extra_repr(self) -> str:
        return self.kind.value


# ---------------- Générateur et couche bruitée ----------------

class Generator(nn.Module):
    def __init__(self, spec: GeneratorSpec, generator: torch.Generator):
        super().__init__()
        self.spec = spec
        c, s = spec.base_channels, spec.init_size
        self.fc = Linear(spec.embedding_dim, c * s * s, generator)
        self.bn_in = BatchNormState(c * s * s, spec.bn_momentum, spec.bn_eps)
        self.blocks = nn.Sequential(
            Op(OperatorKind.UPSAMPLE_NEAREST_2X),
            Conv3x3(c, c, generator, spectral=True),
            BatchNormState(c, spec.bn_momentum, spec.bn_eps),
            Op(OperatorKind.LEAKY_RELU),
            Op(OperatorKind.UPSAMPLE_NEAREST_2X),
            Conv3x3(c, c // 2, generator, spectral=True),
            BatchNormState(c // 2, spec.bn_momentum, spec.bn_eps),
            Op(OperatorKind.LEAKY_RELU),
            Conv3x3(c // 2, spec.channels, generator, spectral=True),
            Op(OperatorKind.SIGMOID),
        )
        self.bn_out = BatchNormState(spec.channels, spec.bn_momentum, spec.bn_eps) if spec.output_batchnorm else None

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        h = self.bn_in(self.fc(z))
        h = h.view(z.shape[0], self.spec.base_channels, self.spec.init_size, self.spec.init_size)
        img = self.blocks(h)
        if self.bn_out is not None:
            img = self.bn_out(img)
        return img


def build_generator(spec: GeneratorSpec, seed: int) -> Generator:
    """Générateur G_{e×e} ; deux constructions de même graine sont identiques bit à bit."""
    return Generator(spec, torch_generator(seed))


class NoisyLayer(nn.Module):
    """Couche bruitée Z (BatchNorm1D puis Linear), réinitialisée à chaque itération de génération."""

    def __init__(self, dim: int, seed: int, bn_momentum: float = 0.1, bn_eps: float = 1e-5):
        super().__init__()
        self.dim = dim
        self.reinit_seed = seed
        self.bn = BatchNormState(dim, bn_momentum, bn_eps)
        self.linear = Linear(dim, dim, torch_generator(seed))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.linear(self.bn(x))


def build_noisy_layer(dim: int, seed: int, bn_momentum: float = 0.1, bn_eps: float = 1e-5) -> NoisyLayer:
    return NoisyLayer(dim, seed, bn_momentum, bn_eps)


def reinit_noisy_layer(state: NoisyLayer, seed: int) -> NoisyLayer:
    """Tire de nouveaux paramètres (déterministe pour une graine) et remet les stats BN à (0, 1)."""
    state.reinit_seed = seed
    state.linear.reset_parameters(torch_generator(seed))
    state.bn.reset_parameters()
    return state


# ---------------- Classifieurs professeur / étudiant ----------------

class NetworkOutput(NamedTuple):
    feature_maps: torch.Tensor      # T_k avant le pooling global, (B, K', h, w)
    embedding: torch.Tensor         # embedding avant-dernier, (B, feature_dim)
    logits: torch.Tensor            # (B, num_classes)


class ConvClassifier(nn.Module):
    def __init__(self, spec: NetworkSpec, generator: torch.Generator):
        super().__init__()
        self.spec = spec
        layers: List[nn.Module] = []
        in_ch = spec.in_channels
        for i, width in enumerate(spec.widths):
            if i > 0:
                layers.append(Op(OperatorKind.MAX_POOL2X))
            layers += [
                Conv3x3(in_ch, width, generator),
                BatchNormState(width, spec.bn_momentum, spec.bn_eps),
                Op(OperatorKind.RELU),
            ]
            in_ch = width
        self.trunk = nn.Sequential(*layers)
        self.pool = Op(OperatorKind.GLOBAL_AVG_POOL)
        self.embed = None
        if spec.embed_out is not None:
            self.embed = nn.Sequential(Linear(in_ch, spec.embed_out, generator), Op(OperatorKind.RELU))
            in_ch = spec.embed_out
        self.head = Linear(in_ch, spec.num_classes, generator)

    @property
    def min_resolution(self) -> int:
        return self.spec.min_resolution

    def forward_all(self, x: torch.Tensor) -> NetworkOutput:
        if x.shape[-1] < self.min_resolution or x.shape[-2] < self.min_resolution:
            raise ShapeError(f"Résolution {tuple(x.shape[-2:])} inférieure au minimum {self.min_resolution}.")
        maps = self.trunk(x)
        embedding = self.pool(maps)
        if self.embed is not None:
            embedding = self.embed(embedding)
        return NetworkOutput(maps, embedding, self.head(embedding))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.forward_all(x).logits

    def embed_features(self, x: torch.Tensor) -> torch.Tensor:
        return self.forward_all(x).embedding

    def bn_states(self) -> List[BatchNormState]:
        return [m for m in self.modules() if isinstance(m, BatchNormState)]


def build_network(spec: NetworkSpec, seed: int) -> ConvClassifier:
    return ConvClassifier(spec, torch_generator(seed))


@contextmanager
def bn_capture(model: nn.Module) -> Iterator[nn.Module]:
    """
    Passe toutes les couches BN du modèle en mode CAPTURE le temps du bloc :
    normalisation avec les stats courantes, stats du batch enregistrées pour L_bn.
    """
    states = [m for m in model.modules() if isinstance(m, BatchNormState)]
    was_training = model.training
    model.eval()
    for s in states:
        s.capture = True
    try:
        yield model
    finally:
        for s in states:
            s.capture = False
        model.train(was_training)


class EmbeddingProjection(nn.Module):
    """
    Projection linéaire figée (graine fixe) de la largeur des features vers celle de f_y.
    Identité quand les largeurs coïncident.
    """

    def __init__(self, in_dim: int, out_dim: int, seed: int = 0):
        super().__init__()
        self.in_dim = in_dim
        self.out_dim = out_dim
        if in_dim == out_dim:
            self.register_buffer("weight", None)
        else:
            gen = torch_generator(seed)
            weight = torch.randn(out_dim, in_dim, generator=gen) / math.sqrt(in_dim)
            self.register_buffer("weight", weight)
            log.warning("Projection figée %d -> %d insérée pour les pertes d'embedding.", in_dim, out_dim)

    def forward(self, f: torch.Tensor) -> torch.Tensor:
        if f.shape[-1] != self.in_dim:
            raise ShapeError(f"Projection: largeur {f.shape[-1]} reçue, {self.in_dim} attendue.")
        if self.weight is None:
            return f
        return f @ self.weight.to(f.dtype).t()


# ---------------- Table des embeddings de classe ----------------

@dataclass
class ClassEmbeddingTable:
    """Une ligne f_y par classe ; figée dès qu'elle provient des centres de classe."""
    rows: torch.Tensor                      # (K, dim) float32
    source: EmbeddingSource
    frozen: bool = True

    def __post_init__(self):
        if self.rows.dim() != 2:
            raise ShapeError(f"La table d'embeddings doit être 2D, reçu {tuple(self.rows.shape)}.")
        check_finite(self.rows, "ClassEmbeddingTable")
        self.rows = self.rows.detach()

    @property
    def num_classes(self) -> int:
        return self.rows.shape[0]

    @property
    def dim(self) -> int:
        return self.rows.shape[1]

    def lookup(self, labels: torch.Tensor) -> torch.Tensor:
        if labels.numel() and int(labels.max()) >= self.num_classes:
            raise ShapeError(f"Étiquette {int(labels.max())} hors de la table ({self.num_classes} classes).")
        if labels.numel() and int(labels.min()) < 0:
            raise ShapeError(f"Étiquette négative {int(labels.min())} pour la table d'embeddings.")
        return self.rows[labels]


def class_center_embeddings(teacher: nn.Module, first_batch, num_classes: int) -> ClassEmbeddingTable:
    """
    f_y = moyenne des embeddings du professeur sur les échantillons étiquetés y du premier batch.
    `first_batch` expose `.images` et `.labels` (SyntheticBatch ou batch réel).
    """
    images, labels = first_batch.images, first_batch.labels
    with torch.no_grad():
        emb = teacher.embed_features(images).detach()
    rows = []
    for y in range(num_classes):
        mask = labels == y
        if not bool(mask.any()):
            raise ValueError(f"Classe {y} absente du premier batch : centre de classe impossible.")
        rows.append(emb[mask].mean(dim=0))
    table = ClassEmbeddingTable(torch.stack(rows).to(torch.float32), EmbeddingSource.CLASS_CENTER, frozen=True)
    log.info("Centres de classe calculés : %d classes, dim=%d", table.num_classes, table.dim)
    return table


def gaussian_code_table(num_classes: int, dim: int, seed: int) -> ClassEmbeddingTable:
    """Codes d'entrée du générateur quand aucun embedding textuel n'est fourni."""
    rows = torch.randn(num_classes, dim, generator=torch_generator(seed))
    return ClassEmbeddingTable(rows, EmbeddingSource.CLASS_CENTER, frozen=True)


def save_embedding_table(table: ClassEmbeddingTable, path: Union[str, Path]) -> None:
    """Format : "MUSEEMB1" | u32 K | u32 dim | K·dim float32 little-endian (ligne par ligne)."""
    payload = table.rows.detach().cpu().numpy().astype("<f4", copy=False).tobytes()
    with open(path, "wb") as f:
        f.write(EMBEDDING_MAGIC)
        f.write(struct.pack("<II", table.num_classes, table.dim))
        f.write(payload)


def load_embedding_table(path: Union[str, Path]) -> ClassEmbeddingTable:
    data = Path(path).read_bytes()
    if data[:8] != EMBEDDING_MAGIC:
        raise EmbeddingFormatError(f"Magic invalide dans {path} : {data[:8]!r}.")
    if len(data) < 16:
        raise EmbeddingFormatError(f"En-tête tronqué dans {path}.")
    k, dim = struct.unpack("<II", data[8:16])
    expected = k * dim * 4
    if len(data) - 16 != expected:
        raise EmbeddingFormatError(
            f"Table tronquée dans {path} : {len(data) - 16} octets pour {expected} attendus (K={k}, dim={dim})."
        )
    rows = np.frombuffer(data, dtype="<f4", offset=16).reshape(k, dim)
    if not np.isfinite(rows).all():
        raise EmbeddingFormatError(f"Valeur non finie dans la table {path}.")
    log.debug("Table d'embeddings chargée : K=%d dim=%d", k, dim)
    return ClassEmbeddingTable(torch.from_numpy(rows.astype(np.float32)), EmbeddingSource.FILE, frozen=True)


def generate_batch(generator: Generator, noisy: NoisyLayer, table: ClassEmbeddingTable,
                   labels: torch.Tensor, resolution: int, epoch: int = 0, iteration: int = 0) -> SyntheticBatch:
    """
    x̂ = G(Z(f_ŷ)). Le gradient remonte vers G et Z ; les lignes de la table sont des constantes.
    """
    if generator.spec.resolution != resolution:
        raise ShapeError(f"Générateur de résolution {generator.spec.resolution} appelé pour e={resolution}.")
    codes = table.lookup(labels).to(generator.fc.weight.dtype)
    images = generator(noisy(codes))
    check_finite(images.detach(), "generate_batch")
    return SyntheticBatch(images=images, labels=labels, resolution=resolution, epoch=epoch, iteration=iteration)


def min_pairwise_mse(table: ClassEmbeddingTable) -> float:
    """Minimum, sur les paires de classes, de l'erreur quadratique moyenne entre lignes."""
    if table.num_classes < 2:
        raise ValueError(f"Au moins 2 classes requises, la table en contient {table.num_classes}.")
    rows = table.rows.to(torch.float64)
    return min(float(((rows[i] - rows[j]) ** 2).mean()) for i, j in combinations(range(table.num_classes), 2))


def derive_radii(min_dist: float) -> Tuple[float, float]:
    """(r_i, r_o) = (d/2, d) : la moitié de la distance minimale pour le rayon intérieur."""
    if not min_dist > 0:
        raise ValueError(f"Distance minimale invalide : {min_dist} (doit être > 0).")
    return min_dist / 2.0, min_dist
