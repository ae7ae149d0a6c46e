import hashlib
import random
import zlib
from fractions import Fraction

import numpy as np
import torch


# --- Fonctions utilitaires : graines, empreintes, rationnels ---

def seed_everything(seed: int, threads: int = 1) -> None:
    """Fixe les graines globales et le nombre de threads (déterminisme CPU)."""
    random.seed(seed)
    np.random.seed(seed % (2 ** 32))
    torch.manual_seed(seed)
    torch.set_num_threads(threads)
    torch.use_deterministic_algorithms(True, warn_only=True)


def derive_seed(master_seed: int, *tags: int) -> int:
    """Graine dérivée, indépendante par flux (phase, résolution, itération...)."""
    seq = np.random.SeedSequence([master_seed, *tags])
    return int(seq.generate_state(1, dtype=np.uint64)[0] >> 1)


def torch_generator(seed: int) -> torch.Generator:
    gen = torch.Generator()
    gen.manual_seed(seed)
    return gen


def parameter_digest(module: torch.nn.Module) -> str:
    """Empreinte SHA-256 des paramètres et buffers d'un module."""
    h = hashlib.sha256()
    for name, tensor in sorted(module.state_dict().items()):
        h.update(name.encode("utf-8"))
        h.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def crc32(payload: bytes) -> int:
    return zlib.crc32(payload) & 0xFFFFFFFF


def as_fraction(value) -> Fraction:
    """Conversion exacte (les float passent par leur représentation décimale)."""
    if isinstance(value, Fraction):
        return value
    if isinstance(value, float):
        return Fraction(str(value))
    return Fraction(value)
