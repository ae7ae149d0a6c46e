from enum import Enum
from typing import List, Literal, Optional, Tuple, Union

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator


# --- Énumérations partagées ---

class MaskKind(str, Enum):
    FULL = "full"
    GAUSSIAN = "gaussian"


class AedEmbedding(str, Enum):
    TEACHER = "teacher"
    STUDENT = "student"


class EmbeddingSource(str, Enum):
    FILE = "file"
    CLASS_CENTER = "class_center"


class DatasetFormat(str, Enum):
    IDX = "idx"
    CIFAR = "cifar"


def _split_list(value):
    """'24, 28' -> ['24', '28'] (les listes du fichier de config sont à virgules)."""
    if isinstance(value, str):
        return [item.strip() for item in value.split(",") if item.strip()]
    if isinstance(value, (int, float)):
        return [value]
    return value


# --- Schémas des pertes et des réseaux ---

class LossWeights(BaseModel):
    """Coefficients α des pertes et rayons du jeu d'embeddings (valeurs par défaut recommandées)."""
    alpha_ce: float     = Field(0.5, ge=0, description="Poids de l'entropie croisée du professeur.")
    alpha_adv: float    = Field(1.3, ge=0, description="Poids du terme adversarial (entre avec un signe -).")
    alpha_bn: float     = Field(10.0, ge=0, description="Poids de l'alignement des stats BN.")
    alpha_cam: float    = Field(0.1, ge=0, description="Poids de la perte CAM.")
    alpha_ed: float     = Field(10.0, ge=0, description="Poids de la perte bornante (étudiant).")
    alpha_aed: float    = Field(5.0, ge=0, description="Poids de la perte de marge (générateur).")
    r_i: float          = Field(0.015, gt=0, description="Rayon intérieur.")
    r_o: float          = Field(0.03, gt=0, description="Rayon extérieur.")

    @model_validator(mode="after")
    def _check_radii(self):
        if not self.r_i < self.r_o:
            raise ValueError(f"Rayons invalides : r_i={self.r_i} doit être < r_o={self.r_o}.")
        return self


class GeneratorSpec(BaseModel):
    """Générateur conditionnel : linear -> BN1d -> reshape -> 2 étages (upsample, conv SN) -> conv SN -> sigmoid -> BN2d"""
    resolution: int         = Field(..., gt=0, description="Résolution cible e (pixels, carré).")
    embedding_dim: int      = Field(..., gt=0, description="Largeur de l'entrée (embedding de classe).")
    base_channels: int      = Field(128, gt=0)
    channels: int           = Field(3, gt=0, description="Canaux de l'image générée.")
    output_batchnorm: bool  = Field(True, description="BatchNorm2D après la sigmoïde (sortie non bornée).")
    bn_momentum: float      = Field(0.1, gt=0, le=1)
    bn_eps: float           = Field(1e-5, ge=0)

    @field_validator("resolution")
    @classmethod
    def _divisible_by_4(cls, e: int) -> int:
        if e % 4 != 0:
            raise ValueError(f"Résolution {e} invalide : doit être divisible par 4.")
        return e

    @property
    def init_size(self) -> int:
        return self.resolution // 4


class NetworkSpec(BaseModel):
    """
    Petit classifieur entièrement convolutif : étages conv3x3-BN-ReLU (max-pool 2x
    entre deux étages), pooling global, embedding optionnel, tête linéaire.
    """
    role: Literal["teacher", "student"]
    in_channels: int        = Field(3, gt=0)
    num_classes: int        = Field(..., ge=2)
    widths: List[int]       = Field(..., min_length=1, description="Largeur de chaque étage convolutif.")
    embed_out: Optional[int] = Field(None, gt=0, description="Couche d'embedding avant la tête (optionnelle).")
    bn_momentum: float      = Field(0.1, gt=0, le=1)
    bn_eps: float           = Field(1e-5, ge=0)

    @field_validator("widths", mode="before")
    @classmethod
    def _parse_widths(cls, value):
        return _split_list(value)

    @property
    def num_pools(self) -> int:
        return len(self.widths) - 1

    @property
    def min_resolution(self) -> int:
        return 2 ** self.num_pools

    @property
    def feature_dim(self) -> int:
        return self.embed_out if self.embed_out is not None else self.widths[-1]

    def cam_size(self, resolution: int) -> int:
        """Taille spatiale des cartes T_k avant le pooling global."""
        size = resolution
        for _ in range(self.num_pools):
            size //= 2
        return size


class PatchGridSpec(BaseModel):
    """Grille de patchs pleine résolution (G) et fenêtre basse résolution (W)."""
    grid_rows: int      = Field(..., gt=0)
    grid_cols: int      = Field(..., gt=0)
    window_rows: int    = Field(..., gt=0)
    window_cols: int    = Field(..., gt=0)
    patch_size: int     = Field(16, gt=0)
    bias: float         = Field(1.0, ge=0, description="λ, raideur du biais vers le centre.")
    anchor_row: int     = Field(7, ge=0, description="Indice de référence des distances (ligne).")
    anchor_col: int     = Field(7, ge=0, description="Indice de référence des distances (colonne).")

    @model_validator(mode="after")
    def _window_fits(self):
        if self.window_rows > self.grid_rows or self.window_cols > self.grid_cols:
            raise ValueError(
                f"Fenêtre {self.window_rows}x{self.window_cols} plus grande que la grille "
                f"{self.grid_rows}x{self.grid_cols}."
            )
        return self


class DatasetHandle(BaseModel):
    """Description d'un split de dataset sur disque (IDX type MNIST ou CIFAR binaire)."""
    name: str
    split: Literal["train", "test"]
    source_format: DatasetFormat
    image_shape: Tuple[int, int, int]   = Field(..., description="(C, H, W)")
    num_classes: int                    = Field(..., ge=2)
    mean: List[float]
    std: List[float]
    images_path: List[str]              = Field(..., min_length=1, description="Fichier(s) d'images (CIFAR : fichiers de batch).")
    labels_path: Optional[str]          = Field(None, description="Fichier d'étiquettes IDX (absent pour CIFAR).")

    @field_validator("images_path", mode="before")
    @classmethod
    def _parse_paths(cls, value):
        return _split_list(value)

    @model_validator(mode="after")
    def _check_norm(self):
        channels = self.image_shape[0]
        if len(self.mean) != channels or len(self.std) != channels:
            raise ValueError(f"mean/std doivent avoir {channels} valeurs (une par canal).")
        if any(s <= 0 for s in self.std):
            raise ValueError("std doit être strictement positif.")
        return self


DEFAULT_NORMALIZATION = {
    DatasetFormat.IDX: ([0.1307], [0.3081]),
    DatasetFormat.CIFAR: ([0.4914, 0.4822, 0.4465], [0.2470, 0.2435, 0.2616]),
}


# --- Configuration d'entraînement ---

REQUIRED_KEYS = (
    "epochs", "iters_g", "steps_g", "iters_s", "resolutions", "batch_sizes",
    "alpha_ce", "alpha_adv", "alpha_bn", "alpha_cam", "alpha_ed", "alpha_aed",
    "r_i", "r_o", "data_ratio", "seed",
)


class TrainConfig(BaseModel):
    """
    Tous les hyperparamètres d'une distillation (fichier clé = valeur).
    Les clés de REQUIRED_KEYS sont obligatoires, les autres ont une valeur par défaut.
    """
    model_config = ConfigDict(extra="forbid", use_enum_values=False)

    # Boucle principale
    epochs: int             = Field(..., gt=0, description="Nombre d'époques E.")
    iters_g: int            = Field(..., gt=0, description="Itérations de génération I par époque.")
    steps_g: int            = Field(..., gt=0, description="Pas d'optimisation g du générateur.")
    iters_s: int            = Field(..., gt=0, description="Itérations étudiant de base (mises à l'échelle par d_r).")
    resolutions: List[int]  = Field(..., min_length=1)
    batch_sizes: List[int]  = Field(..., min_length=1)

    # Pertes
    alpha_ce: float         = Field(..., ge=0)
    alpha_adv: float        = Field(..., ge=0)
    alpha_bn: float         = Field(..., ge=0)
    alpha_cam: float        = Field(..., ge=0)
    alpha_ed: float         = Field(..., ge=0)
    alpha_aed: float        = Field(..., ge=0)
    r_i: float              = Field(..., gt=0)
    r_o: float              = Field(..., gt=0)
    radii_from_table: bool  = Field(False, description="Remplace r_i/r_o par derive_radii(table).")
    mask_kind: MaskKind     = Field(MaskKind.FULL)
    mask_params: List[float] = Field(default_factory=lambda: [1.0])
    aed_embedding: AedEmbedding = Field(AedEmbedding.STUDENT)

    # Budget et embeddings
    data_ratio: float       = Field(..., gt=0, le=1, description="Ratio d_r de données synthétiques.")
    dataset_size: int       = Field(60000, gt=0, description="Cardinal N du jeu réel.")
    base_resolution: int    = Field(28, gt=0, description="Résolution pleine l.")
    num_classes: int        = Field(10, ge=2)
    channels: int           = Field(1, gt=0)
    embedding_source: EmbeddingSource = Field(EmbeddingSource.CLASS_CENTER)
    embedding_path: Optional[str] = None
    embedding_dim: int      = Field(64, gt=0)

    # Architectures
    generator_base_channels: int = Field(128, gt=0)
    teacher_widths: List[int] = Field(default_factory=lambda: [32, 64, 64])
    student_widths: List[int] = Field(default_factory=lambda: [16, 32, 64])
    bn_momentum: float      = Field(0.1, gt=0, le=1)
    bn_eps: float           = Field(1e-5, ge=0)

    # Optimisation
    lr_generator: float     = Field(4e-3, ge=0)
    lr_student: float       = Field(1e-3, ge=0)
    weight_decay_student: float = Field(1e-2, ge=0)
    warmup_frac: float      = Field(0.1, ge=0, lt=1)
    student_batch_size: Optional[int] = Field(None, gt=1)

    # Pré-entraînement du professeur
    teacher_epochs: int     = Field(10, gt=0)
    teacher_lr: float       = Field(0.1, gt=0)
    teacher_momentum: float = Field(0.9, ge=0)
    teacher_weight_decay: float = Field(5e-4, ge=0)
    teacher_batch_size: int = Field(128, gt=0)
    teacher_accuracy_tolerance: float = Field(0.5, ge=0)

    # Fichiers
    teacher_checkpoint: Optional[str] = None
    dataset_format: DatasetFormat = Field(DatasetFormat.IDX)
    train_images: Optional[str] = None
    train_labels: Optional[str] = None
    test_images: Optional[str] = None
    test_labels: Optional[str] = None
    norm_mean: Optional[List[float]] = None
    norm_std: Optional[List[float]] = None
    out_dir: str            = "runs/muse"

    # Exécution
    seed: int               = Field(..., ge=0)
    threads: int            = Field(1, gt=0)
    eval_every: int         = Field(1, gt=0)
    eval_resolution: str    = Field("native", description="'native' ou une résolution entière (redimensionnement bilinéaire).")
    pool_snapshot_every: int = Field(0, ge=0, description="0 = snapshot du pool en fin d'entraînement seulement.")
    dump_images: int        = Field(0, ge=0, description="Images synthétiques exportées en PPM en fin de run.")
    log_wall_time: bool     = Field(False, description="Renseigne wall_seconds (rend le CSV non reproductible).")

    @field_validator("resolutions", "batch_sizes", "mask_params", "teacher_widths",
                     "student_widths", "norm_mean", "norm_std", mode="before")
    @classmethod
    def _parse_lists(cls, value):
        return _split_list(value)

    @model_validator(mode="after")
    def _check_consistency(self):
        if len(self.resolutions) != len(self.batch_sizes):
            raise ValueError("resolutions et batch_sizes doivent avoir la même longueur.")
        for e in self.resolutions:
            if e % 4 != 0 or e <= 0:
                raise ValueError(f"Résolution {e} invalide : doit être positive et divisible par 4.")
            if e > self.base_resolution:
                raise ValueError(f"Résolution {e} supérieure à la résolution de base l={self.base_resolution}.")
        if len(set(self.resolutions)) != len(self.resolutions):
            raise ValueError("resolutions ne doit pas contenir de doublons.")
        if any(b < 2 for b in self.batch_sizes):
            raise ValueError("Chaque batch synthétique doit contenir au moins 2 images (batchnorm).")
        if not self.r_i < self.r_o:
            raise ValueError(f"Rayons invalides : r_i={self.r_i} doit être < r_o={self.r_o}.")
        expected = 1 if self.mask_kind == MaskKind.FULL else 2
        if len(self.mask_params) != expected:
            raise ValueError(f"mask_params attend {expected} valeur(s) pour mask_kind={self.mask_kind.value}.")
        if self.embedding_source == EmbeddingSource.FILE and not self.embedding_path:
            raise ValueError("embedding_source=file exige embedding_path.")
        if (self.norm_mean is None) != (self.norm_std is None):
            raise ValueError("norm_mean et norm_std vont ensemble.")
        if self.eval_resolution != "native":
            if not self.eval_resolution.isdigit() or int(self.eval_resolution) <= 0:
                raise ValueError(f"eval_resolution invalide : '{self.eval_resolution}' ('native' ou entier > 0).")
        return self

    # --- Valeurs dérivées ---

    @property
    def loss_weights(self) -> LossWeights:
        return LossWeights(
            alpha_ce=self.alpha_ce, alpha_adv=self.alpha_adv, alpha_bn=self.alpha_bn,
            alpha_cam=self.alpha_cam, alpha_ed=self.alpha_ed, alpha_aed=self.alpha_aed,
            r_i=self.r_i, r_o=self.r_o,
        )

    @property
    def resolved_iters_s(self) -> int:
        """S effectif : iters_s mis à l'échelle par d_r."""
        return max(1, round(self.iters_s * self.data_ratio))

    @property
    def resolved_student_batch_size(self) -> int:
        return self.student_batch_size or max(self.batch_sizes)

    @property
    def eval_policy(self) -> Union[str, int]:
        return "native" if self.eval_resolution == "native" else int(self.eval_resolution)

    @property
    def normalization(self) -> Tuple[List[float], List[float]]:
        if self.norm_mean is not None:
            return self.norm_mean, self.norm_std
        mean, std = DEFAULT_NORMALIZATION[self.dataset_format]
        return list(mean), list(std)

    def teacher_spec(self) -> NetworkSpec:
        return NetworkSpec(role="teacher", in_channels=self.channels, num_classes=self.num_classes,
                           widths=self.teacher_widths, bn_momentum=self.bn_momentum, bn_eps=self.bn_eps)

    def student_spec(self) -> NetworkSpec:
        return NetworkSpec(role="student", in_channels=self.channels, num_classes=self.num_classes,
                           widths=self.student_widths, bn_momentum=self.bn_momentum, bn_eps=self.bn_eps)

    def generator_spec(self, resolution: int, embedding_dim: int) -> GeneratorSpec:
        return GeneratorSpec(resolution=resolution, embedding_dim=embedding_dim,
                             base_channels=self.generator_base_channels, channels=self.channels,
                             bn_momentum=self.bn_momentum, bn_eps=self.bn_eps)
