from sqlalchemy import create_engine
from sqlalchemy.engine import Engine
from sqlalchemy.orm import DeclarativeBase, sessionmaker

from muse_distill.core.config import get_metrics_db_url

# --- Configuration de la connexion ---

# L'URL vient de la ligne de commande (--metrics-db) ou de MUSE_METRICS_DB.
# Exemple : 'sqlite:///runs/muse_metrics.db'
DEFAULT_DATABASE_URL = "sqlite:///runs/muse_metrics.db"


# Classe de base pour tous les modèles de table.
class Base(DeclarativeBase):
    pass


def make_engine(url: str = None) -> Engine:
    """Moteur synchrone ; 'echo=False' pour ne pas afficher les requêtes SQL."""
    return create_engine(url or get_metrics_db_url() or DEFAULT_DATABASE_URL, echo=False)


def make_session_factory(engine: Engine) -> sessionmaker:
    return sessionmaker(bind=engine, autocommit=False, autoflush=False, expire_on_commit=False)


def init_db(engine: Engine) -> None:
    """Crée les tables. Les modèles doivent être importés avant cet appel pour être reconnus."""
    from muse_distill.dfkd_database import models  # noqa: F401
    Base.metadata.create_all(engine)
