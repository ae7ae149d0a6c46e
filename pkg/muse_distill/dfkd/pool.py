# muse_distill/dfkd/pool.py

"""
Pool mémoire M : batches synthétiques multi-résolution,
comptabilisés dans un budget exprimé en équivalents d'images pleine résolution.
"""

import struct
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Dict, List, Optional, Union

import numpy as np
import torch

from muse_distill.core.exceptions import (
    BudgetExhaustedError, PoolChecksumError, PoolCompatibilityError, PoolFormatError, ShapeError,
)
from muse_distill.core.logger import get_logger
from muse_distill.core.utils import as_fraction, crc32
from muse_distill.dfkd.diffcore import check_finite

log = get_logger(__name__)

POOL_MAGIC = b"MUSEPOOL"
POOL_VERSION = 1
DEFAULT_CHANNELS = 3
MAX_INFERRED_CHANNELS = 4


@dataclass
class SyntheticBatch:
    images: torch.Tensor            # (B, C, e, e)
    labels: torch.Tensor            # (B,) int64
    resolution: int
    epoch: int = 0
    iteration: int = 0

    def __post_init__(self):
        if self.images.dim() != 4 or self.images.shape[-1] != self.resolution or self.images.shape[-2] != self.resolution:
            raise ShapeError(f"Batch de forme {tuple(self.images.shape)} incohérent avec e={self.resolution}.")
        if self.labels.shape != (self.images.shape[0],):
            raise ShapeError(f"{self.labels.numel()} étiquettes pour {self.images.shape[0]} images.")
        if self.labels.numel() and int(self.labels.min()) < 0:
            raise ShapeError("Étiquette négative dans le batch.")

    def __len__(self) -> int:
        return self.images.shape[0]


# ---------------- Budget ----------------

def cost_units(e: int, l: int) -> Fraction:
    """Coût exact d'une image e×e en unités pleine résolution : e²/l²."""
    if e <= 0 or l <= 0:
        raise ValueError(f"Résolutions invalides : e={e}, l={l} (doivent être > 0).")
    if e > l:
        raise ValueError(f"Résolution e={e} supérieure à la résolution de base l={l}.")
    return Fraction(e * e, l * l)


def budget_from_ratio(d_r, n: int) -> Fraction:
    """Capacité d_r · N en unités pleine résolution."""
    ratio = as_fraction(d_r)
    if not (0 < ratio <= 1):
        raise ValueError(f"Ratio de données invalide : {d_r} (doit être dans (0, 1]).")
    if n < 1:
        raise ValueError(f"Taille de dataset invalide : {n} (doit être >= 1).")
    return ratio * n


@dataclass
class BudgetLedger:
    base_resolution: int
    capacity_units: Fraction
    spent_units: Fraction = Fraction(0)
    exhausted: bool = False

    @classmethod
    def from_ratio(cls, base_resolution: int, data_ratio, dataset_size: int) -> "BudgetLedger":
        return cls(base_resolution=base_resolution, capacity_units=budget_from_ratio(data_ratio, dataset_size))

    @property
    def remaining_units(self) -> Fraction:
        return self.capacity_units - self.spent_units


# ---------------- Pool ----------------

@dataclass
class MemoryPool:
    ledger: BudgetLedger
    rng_state: int = 0
    channels: int = DEFAULT_CHANNELS
    batches: List[SyntheticBatch] = field(default_factory=list)

    @property
    def num_images(self) -> int:
        return sum(len(b) for b in self.batches)

    def counts_by_resolution(self) -> Dict[int, int]:
        counts: Dict[int, int] = {}
        for b in self.batches:
            counts[b.resolution] = counts.get(b.resolution, 0) + len(b)
        return dict(sorted(counts.items()))

    def images_by_resolution(self) -> Dict[int, SyntheticBatch]:
        """Images regroupées par résolution, dans l'ordre d'ajout. Copie concaténée, non conservée."""
        grouped: Dict[int, List[SyntheticBatch]] = {}
        for b in self.batches:
            grouped.setdefault(b.resolution, []).append(b)
        return {
            e: SyntheticBatch(images=torch.cat([p.images for p in grouped[e]]),
                              labels=torch.cat([p.labels for p in grouped[e]]), resolution=e)
            for e in sorted(grouped)
        }

    def gather(self, resolution: int, indices: np.ndarray) -> SyntheticBatch:
        """Images d'indices donnés dans la suite (ordre d'ajout) des images de résolution `resolution`."""
        parts = [b for b in self.batches if b.resolution == resolution]
        ends = np.cumsum([len(p) for p in parts])
        which = np.searchsorted(ends, indices, side="right")
        local = indices - (ends[which] - np.array([len(parts[w]) for w in which], dtype=np.int64))
        images = torch.stack([parts[w].images[j] for w, j in zip(which, local)])
        labels = torch.stack([parts[w].labels[j] for w, j in zip(which, local)])
        return SyntheticBatch(images=images, labels=labels, resolution=resolution)

    def recomputed_spent(self) -> Fraction:
        return sum((len(b) * cost_units(b.resolution, self.ledger.base_resolution) for b in self.batches), Fraction(0))


def pool_append(pool: MemoryPool, batch: SyntheticBatch) -> MemoryPool:
    """
    Ajoute un batch (détaché, arrondi à la précision de stockage float16).
    Si le budget ne suffit pas, le batch est tronqué et le pool marqué épuisé.
    """
    ledger = pool.ledger
    if ledger.exhausted:
        raise BudgetExhaustedError(
            f"Budget épuisé ({float(ledger.spent_units):.3f}/{float(ledger.capacity_units):.3f} unités)."
        )
    if batch.images.shape[1] != pool.channels:
        raise ShapeError(f"Batch à {batch.images.shape[1]} canaux pour un pool à {pool.channels}.")

    unit = cost_units(batch.resolution, ledger.base_resolution)
    fits = int(ledger.remaining_units // unit)
    count = min(len(batch), fits)
    if count < len(batch):
        log.info("Budget atteint : batch e=%d tronqué à %d/%d images.", batch.resolution, count, len(batch))
        ledger.exhausted = True

    if count > 0:
        images = batch.images[:count].detach().cpu().to(torch.float16).to(torch.float32)
        check_finite(images, "pool_append")
        stored = SyntheticBatch(images=images, labels=batch.labels[:count].detach().cpu().to(torch.int64),
                                resolution=batch.resolution, epoch=batch.epoch, iteration=batch.iteration)
        pool.batches.append(stored)
        ledger.spent_units += count * unit

    if ledger.remaining_units == 0:
        ledger.exhausted = True
    return pool


def pool_sample(pool: MemoryPool, batch_size: int, rng: Optional[np.random.Generator] = None) -> SyntheticBatch:
    """
    Tirage uniforme avec remise ; la résolution du minibatch est tirée au prorata
    du nombre d'images stockées. Sans `rng`, le flux interne du pool est utilisé et avancé.
    """
    counts_by_e = pool.counts_by_resolution()
    if not counts_by_e:
        raise ValueError("Pool vide : aucun échantillon disponible.")
    own_stream = rng is None
    if own_stream:
        rng = np.random.default_rng(pool.rng_state)

    resolutions = list(counts_by_e)
    counts = np.array([counts_by_e[e] for e in resolutions], dtype=np.float64)
    e = resolutions[int(rng.choice(len(resolutions), p=counts / counts.sum()))]
    idx = rng.integers(0, counts_by_e[e], size=batch_size)

    if own_stream:
        pool.rng_state = int(rng.integers(0, 2 ** 63))
    return pool.gather(e, idx)


# ---------------- Persistance ----------------

def pool_save(pool: MemoryPool, path: Union[str, Path]) -> None:
    """
    "MUSEPOOL" | u32 version | u32 l | u64 capacité num/dén | u64 dépensé num/dén |
    u32 nb batches | par batch (u32 B, u32 e, u32[B] étiquettes, pixels float16 LE) |
    u64 état rng | CRC32 de tout ce qui suit le magic.
    """
    ledger = pool.ledger
    parts = [
        struct.pack("<II", POOL_VERSION, ledger.base_resolution),
        struct.pack("<QQQQ", ledger.capacity_units.numerator, ledger.capacity_units.denominator,
                    ledger.spent_units.numerator, ledger.spent_units.denominator),
        struct.pack("<I", len(pool.batches)),
    ]
    for b in pool.batches:
        parts.append(struct.pack("<II", len(b), b.resolution))
        parts.append(b.labels.numpy().astype("<u4").tobytes())
        parts.append(b.images.numpy().astype("<f2").tobytes())
    parts.append(struct.pack("<Q", pool.rng_state))
    payload = b"".join(parts)
    with open(path, "wb") as f:
        f.write(POOL_MAGIC)
        f.write(payload)
        f.write(struct.pack("<I", crc32(payload)))
    log.info("Pool enregistré : %s (%d images, %d batches)", path, pool.num_images, len(pool.batches))


def _batches_end(payload: bytes, offset: int, n_batches: int, channels: int) -> Optional[int]:
    """Fin de la section des batches pour un nombre de canaux donné, None si elle déborde."""
    for _ in range(n_batches):
        if offset + 8 > len(payload):
            return None
        b, e = struct.unpack_from("<II", payload, offset)
        offset += 8 + 4 * b + 2 * b * channels * e * e
    return offset if offset <= len(payload) else None


def _resolve_channels(payload: bytes, offset: int, n_batches: int, channels: Optional[int], path) -> int:
    expected_end = len(payload) - 8                 # u64 état rng
    if channels is not None:
        end = _batches_end(payload, offset, n_batches, channels)
        if end is None or end > expected_end:
            raise PoolFormatError(f"Contenu de pool tronqué dans {path} pour {channels} canaux.")
        if end < expected_end:
            raise PoolFormatError(f"{expected_end - end} octets en trop après les batches dans {path}.")
        return channels
    if n_batches == 0:
        if offset != expected_end:
            raise PoolFormatError(f"{expected_end - offset} octets inattendus dans le pool vide {path}.")
        return DEFAULT_CHANNELS
    candidates = [c for c in range(1, MAX_INFERRED_CHANNELS + 1)
                  if _batches_end(payload, offset, n_batches, c) == expected_end]
    if len(candidates) != 1:
        raise PoolFormatError(
            f"Nombre de canaux indéterminable pour {path} (candidats : {candidates}) ; longueur incohérente."
        )
    return candidates[0]


def _exhausted_after_load(ledger: BudgetLedger, resolutions) -> bool:
    """Épuisé si plus aucune image d'une résolution déjà stockée ne tient dans le reste du budget."""
    if ledger.remaining_units == 0:
        return True
    costs = [cost_units(e, ledger.base_resolution) for e in resolutions]
    return bool(costs) and ledger.remaining_units < min(costs)


def pool_load(path: Union[str, Path], expected_base_resolution: Optional[int] = None,
              channels: Optional[int] = None) -> MemoryPool:
    """
    Relit un pool. `channels` fixe le nombre de canaux attendu ; sans lui, il est
    déduit de la longueur du fichier. Le drapeau d'épuisement est recalculé depuis le registre.
    """
    data = Path(path).read_bytes()
    if data[:8] != POOL_MAGIC:
        raise PoolFormatError(f"Magic invalide dans {path} : {data[:8]!r}.")
    if len(data) < 12:
        raise PoolChecksumError(f"Fichier de pool tronqué : {path}.")
    payload, (stored_crc,) = data[8:-4], struct.unpack("<I", data[-4:])
    if crc32(payload) != stored_crc:
        raise PoolChecksumError(f"CRC32 invalide pour {path} (fichier tronqué ou corrompu).")

    try:
        version, l = struct.unpack_from("<II", payload, 0)
        if version != POOL_VERSION:
            raise PoolFormatError(f"Version de pool {version} non supportée (attendu {POOL_VERSION}).")
        if expected_base_resolution is not None and l != expected_base_resolution:
            raise PoolCompatibilityError(
                f"Pool enregistré pour l={l}, incompatible avec la config active (l={expected_base_resolution})."
            )
        cap_n, cap_d, spent_n, spent_d = struct.unpack_from("<QQQQ", payload, 8)
        (n_batches,) = struct.unpack_from("<I", payload, 40)
        offset = 44
        channels = _resolve_channels(payload, offset, n_batches, channels, path)
        ledger = BudgetLedger(base_resolution=l, capacity_units=Fraction(cap_n, cap_d),
                              spent_units=Fraction(spent_n, spent_d))
        pool = MemoryPool(ledger=ledger, channels=channels)
        for _ in range(n_batches):
            b, e = struct.unpack_from("<II", payload, offset)
            offset += 8
            labels = np.frombuffer(payload, dtype="<u4", count=b, offset=offset).astype(np.int64)
            offset += 4 * b
            n_pix = b * channels * e * e
            pixels = np.frombuffer(payload, dtype="<f2", count=n_pix, offset=offset)
            offset += 2 * n_pix
            images = torch.from_numpy(pixels.astype(np.float32).reshape(b, channels, e, e))
            pool.batches.append(SyntheticBatch(images=images, labels=torch.from_numpy(labels), resolution=e))
        (pool.rng_state,) = struct.unpack_from("<Q", payload, offset)
    except (struct.error, ValueError, ZeroDivisionError) as e:
        raise PoolFormatError(f"Contenu de pool illisible dans {path} : {e}") from e

    if pool.recomputed_spent() != ledger.spent_units:
        raise PoolFormatError(f"Registre incohérent dans {path} : budget dépensé ≠ contenu.")
    ledger.exhausted = _exhausted_after_load(ledger, pool.counts_by_resolution())
    log.info("Pool chargé : %s (%d images)", path, pool.num_images)
    return pool


def pool_summary(pool: MemoryPool) -> Dict[str, object]:
    """Résumé pour `inspect-pool` : comptes par résolution et équivalences de budget."""
    ledger = pool.ledger
    per_res = {}
    for e, group in pool.images_by_resolution().items():
        unit = cost_units(e, ledger.base_resolution)
        per_res[e] = {
            "images": len(group),
            "units": len(group) * unit,
            "images_per_unit": 1 / unit,
            "label_counts": np.bincount(group.labels.numpy()).tolist(),
        }
    return {
        "base_resolution": ledger.base_resolution,
        "batches": len(pool.batches),
        "images": pool.num_images,
        "spent_units": ledger.spent_units,
        "capacity_units": ledger.capacity_units,
        "exhausted": ledger.exhausted,
        "resolutions": per_res,
    }
