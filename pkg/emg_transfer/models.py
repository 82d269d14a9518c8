"""models for the cache index and run log"""

from __future__ import annotations

from sqlalchemy import Column, DateTime, Float, Integer, String, Text

from .db import Base
from .timezone import now_local


class CachedSourceModel(Base):
    """One trained source model file and the inputs it was trained on."""

    __tablename__ = "cached_source_models"
    id = Column(Integer, primary_key=True)
    subject_id = Column(String, unique=True, index=True)
    data_hash = Column(String)
    grid_key = Column(String)
    file_name = Column(String)
    checksum = Column(String)
    C = Column(Float)
    gamma = Column(Float)
    created_at = Column(DateTime, default=now_local)
    updated_at = Column(DateTime, default=now_local, onupdate=now_local)


class TargetRunLog(Base):
    """Outcome of one target within a run."""

    __tablename__ = "target_run_logs"

    id = Column(Integer, primary_key=True)
    run_id = Column(String, index=True)
    target_id = Column(String, index=True)
    status = Column(String, default="success", index=True)
    methods = Column(String, default="")
    error_message = Column(Text, nullable=True)
    started_at = Column(DateTime, default=now_local)
    finished_at = Column(DateTime, nullable=True)
