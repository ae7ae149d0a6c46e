# muse_distill/core/exceptions.py

from typing import Optional


class MuseError(Exception):
    """Erreur de base du moteur de distillation"""
    pass


class ShapeError(MuseError):
    """Formes de tenseurs incompatibles avec l'opérateur ou la perte."""
    pass


class NonFiniteError(MuseError):
    """Valeur NaN/Inf détectée à la frontière d'un opérateur."""
    pass


class GradientError(MuseError):
    """Rétropropagation impossible (perte non scalaire, stats BN manquantes, ...)."""
    pass


class ConfigError(MuseError):
    """Fichier de configuration invalide. Porte la clé et la ligne fautives si connues."""

    def __init__(self, message: str, key: Optional[str] = None, line: Optional[int] = None):
        self.key = key
        self.line = line
        where = f"ligne {line}: " if line is not None else ""
        super().__init__(f"{where}{message}")


class EmbeddingFormatError(MuseError):
    """Fichier de table d'embeddings corrompu (magic, troncature, valeurs non finies)."""
    pass


class CheckpointFormatError(MuseError):
    """Fichier de checkpoint illisible ou incompatible avec le modèle."""
    pass


class PoolFormatError(MuseError):
    """Fichier de pool mémoire illisible."""
    pass


class PoolChecksumError(PoolFormatError):
    """CRC32 du pool invalide (fichier tronqué ou modifié)."""
    pass


class PoolCompatibilityError(PoolFormatError):
    """Pool enregistré avec une résolution de base différente de la config active."""
    pass


class BudgetExhaustedError(MuseError):
    """Ajout dans un pool dont le budget est déjà épuisé."""
    pass


class DatasetFormatError(MuseError):
    """Fichier de dataset (IDX / CIFAR binaire) invalide."""
    pass


class PatchGridError(MuseError):
    """Grille de patchs ou fenêtre invalide."""
    pass


class TrainingAbortedError(MuseError):
    """Entraînement interrompu (perte non finie, professeur modifié, ...)."""
    pass
