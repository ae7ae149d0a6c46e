import logging
import os
from pathlib import Path
from typing import Union

from dotenv import load_dotenv

# charge immédiatement le .env
load_dotenv()

PACKAGE_LOGGER = "muse_distill"
LOG_FORMAT = "%(asctime)s | %(levelname)s | %(name)s | %(message)s"
LOG_DATEFMT = "%Y-%m-%d %H:%M:%S"
RUN_LOG_FILE = "train.log"


def _formatter() -> logging.Formatter:
    return logging.Formatter(fmt=LOG_FORMAT, datefmt=LOG_DATEFMT)


def _configure(logger: logging.Logger, log_level: str) -> None:
    handler = logging.StreamHandler()
    handler.setFormatter(_formatter())
    logger.addHandler(handler)
    logger.setLevel(log_level)
    logger.propagate = False
    logger.debug(f"Logger initialized for '{logger.name}' with level={log_level}")


def get_logger(name: str) -> logging.Logger:
    """
    Logger standardisé, niveau selon LOG_LEVEL.
    Les modules du paquet remontent au logger `muse_distill`, seul à porter un handler :
    un fichier de run attaché avec attach_run_log reçoit donc les messages de tous les modules.
    """
    log_level = os.getenv("LOG_LEVEL", "INFO").upper()

    package = logging.getLogger(PACKAGE_LOGGER)
    if not package.handlers:
        _configure(package, log_level)
    if name == PACKAGE_LOGGER or name.startswith(PACKAGE_LOGGER + "."):
        return logging.getLogger(name)

    logger = logging.getLogger(name)
    if not logger.handlers:
        _configure(logger, log_level)
    return logger


def attach_run_log(out_dir: Union[str, Path]) -> logging.FileHandler:
    """Duplique les logs du paquet dans <out_dir>/train.log (mode ajout, pour les reprises)."""
    path = Path(out_dir) / RUN_LOG_FILE
    path.parent.mkdir(parents=True, exist_ok=True)
    handler = logging.FileHandler(path, mode="a", encoding="utf-8")
    handler.setFormatter(_formatter())
    get_logger(PACKAGE_LOGGER).addHandler(handler)
    return handler


def detach_run_log(handler: logging.FileHandler) -> None:
    logging.getLogger(PACKAGE_LOGGER).removeHandler(handler)
    handler.close()
