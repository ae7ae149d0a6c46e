from typing import List

from sqlalchemy import select
from sqlalchemy.orm import Session

from muse_distill.dfkd.report import MetricsRow
from .models import MetricsRecord, Run


def create_run(session: Session, run_id: str, seed: int, config_text: str) -> Run:
    """
    Crée (ou réutilise, en cas de reprise) l'enregistrement du run.
    L'appelant est responsable du 'commit'.
    """
    run = session.get(Run, run_id)
    if run is None:
        run = Run(run_id=run_id, seed=seed, config_text=config_text, status="running")
        session.add(run)
    else:
        run.status = "running"
    session.flush()
    return run


def add_metrics_record(session: Session, run_id: str, row: MetricsRow) -> MetricsRecord:
    """Enregistre une ligne de métriques validée par le schéma Pydantic."""
    record = MetricsRecord(run_id=run_id, **row.model_dump())
    session.add(record)
    session.flush()
    return record


def clear_metrics_from(session: Session, run_id: str, epoch: int) -> None:
    """Supprime les lignes d'époque >= epoch (reprise d'un run interrompu)."""
    for record in session.scalars(
        select(MetricsRecord).where(MetricsRecord.run_id == run_id, MetricsRecord.epoch >= epoch)
    ):
        session.delete(record)
    session.flush()


def set_run_status(session: Session, run_id: str, status: str) -> None:
    run = session.get(Run, run_id)
    if run is not None:
        run.status = status
        session.flush()


def list_metrics(session: Session, run_id: str) -> List[MetricsRecord]:
    return list(session.scalars(
        select(MetricsRecord).where(MetricsRecord.run_id == run_id).order_by(MetricsRecord.id)
    ))
