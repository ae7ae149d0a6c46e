from datetime import datetime

from sqlalchemy import Column, DateTime, Float, ForeignKey, Index, Integer, String, Text
from sqlalchemy.orm import relationship

from muse_distill.dfkd_database.database import Base


class Run(Base):
    """
    Un run de distillation : graine, configuration résolue et statut.
    Les lignes de métriques y sont rattachées.
    """
    __tablename__ = "runs"

    run_id = Column(String, primary_key=True)
    seed = Column(Integer, nullable=False)
    config_text = Column(Text, nullable=False)
    status = Column(String, nullable=False, default="running")   # running / completed / aborted
    created_at = Column(DateTime, default=datetime.utcnow, nullable=False)

    metrics = relationship("MetricsRecord", back_populates="run", cascade="all, delete-orphan",
                           order_by="MetricsRecord.id")

    def __repr__(self):
        return f"<Run(run_id='{self.run_id}', seed={self.seed}, status={self.status})>"


class MetricsRecord(Base):
    """Miroir d'une ligne du CSV de métriques."""
    __tablename__ = "metrics_records"

    __table_args__ = (
        Index("metrics_run_epoch_idx", "run_id", "epoch"),
    )

    id = Column(Integer, primary_key=True, autoincrement=True)
    run_id = Column(String, ForeignKey("runs.run_id"), nullable=False)
    epoch = Column(Integer, nullable=False)
    phase = Column(String, nullable=False)

    # ---------------------------
    # Pertes (moyennes sur la phase)
    # ---------------------------
    loss_ce = Column(Float, nullable=True)
    loss_adv = Column(Float, nullable=True)
    loss_bn = Column(Float, nullable=True)
    loss_cam = Column(Float, nullable=True)
    loss_aed = Column(Float, nullable=True)
    loss_kl = Column(Float, nullable=True)
    loss_ed = Column(Float, nullable=True)

    pool_units = Column(Float, nullable=True)
    top1 = Column(Float, nullable=True)
    top5 = Column(Float, nullable=True)
    wall_seconds = Column(Float, nullable=True)

    run = relationship("Run", back_populates="metrics")

    def __repr__(self):
        return f"<MetricsRecord(run='{self.run_id}', epoch={self.epoch}, phase={self.phase}, top1={self.top1})>"
