# muse_distill/core/config.py

from dotenv import load_dotenv
from typing import Optional
import os

load_dotenv()


def get_thread_override() -> Optional[int]:
    """
    Nombre de threads imposé par l'environnement (MUSE_THREADS).
    Retourne None si la variable est absente : la valeur du fichier de config s'applique.
    """
    raw = os.getenv("MUSE_THREADS")
    if raw is None or raw.strip() == "":
        return None
    try:
        threads = int(raw)
    except ValueError as e:
        raise RuntimeError(f"MUSE_THREADS invalide : '{raw}' (entier attendu).") from e
    if threads < 1:
        raise RuntimeError(f"MUSE_THREADS invalide : {threads} (doit être >= 1).")
    return threads


def get_metrics_db_url() -> Optional[str]:
    """URL SQLAlchemy du registre des runs (MUSE_METRICS_DB), None si non configurée."""
    url = os.getenv("MUSE_METRICS_DB")
    return url or None
