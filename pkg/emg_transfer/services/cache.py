"""Trained source models on disk, indexed by data hash and grid."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from pydantic import ValidationError
from sqlalchemy.orm import Session

from emg_transfer.config import settings
from emg_transfer.db import session_factory
from emg_transfer.errors import DataError
from emg_transfer.models import CachedSourceModel
from emg_transfer.schemas import ExperimentConfig, ModelDocument
from emg_transfer.services.cohort import Cohort
from emg_transfer.services.kernels import KernelSpec
from emg_transfer.services.lssvm import (
    GridSpec,
    MulticlassModel,
    grid_search,
    model_from_dict,
    model_to_dict,
    train_multiclass,
)
from emg_transfer.timezone import now_local
from emg_transfer.utils import checksum_matches, file_checksum

logger = logging.getLogger(__name__)

MODEL_TYPE = "multiclass_lssvm"


@dataclass
class CacheReport:
    trained: list[str] = field(default_factory=list)
    reused: list[str] = field(default_factory=list)
    corrupted: list[str] = field(default_factory=list)


def save_model_file(path: str | Path, model: MulticlassModel) -> str:
    """Write the JSON document and return its SHA-256."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    doc = ModelDocument(type=MODEL_TYPE, payload=model_to_dict(model))
    path.write_text(json.dumps(doc.model_dump(), sort_keys=True), encoding="utf-8")
    return file_checksum(path)


def load_model_file(path: str | Path) -> MulticlassModel:
    path = Path(path)
    try:
        doc = ModelDocument.model_validate_json(path.read_text(encoding="utf-8"))
    except (OSError, ValidationError) as exc:
        raise DataError(f"unreadable model file {path.name}: {exc}") from exc
    if doc.type != MODEL_TYPE:
        raise DataError(f"{path.name}: expected a '{MODEL_TYPE}' document, got '{doc.type}'")
    return model_from_dict(doc.payload)


def grid_key(grid: GridSpec, folds: int, classes: np.ndarray) -> str:
    return f"{grid.key()};folds={folds};classes={','.join(str(int(c)) for c in classes)}"


def resolve_folds(cfg: ExperimentConfig) -> int:
    """Configured fold count, else the environment default."""
    return cfg.grid.folds if "folds" in cfg.grid.model_fields_set else settings.cv_folds


class SourceCache:
    """Model files ``source_<id>.json`` plus their SQLite index."""

    def __init__(self, cache_dir: str | Path):
        self.cache_dir = Path(cache_dir)
        self.sessions = session_factory(self.cache_dir)

    def model_path(self, subject_id: str) -> Path:
        return self.cache_dir / f"source_{subject_id}.json"

    def lookup(self, db: Session, subject_id: str, data_hash: str, key: str) -> Optional[MulticlassModel]:
        """Cached model when hash, grid key and file checksum all match."""
        row = db.query(CachedSourceModel).filter_by(subject_id=subject_id).first()
        if not row or row.data_hash != data_hash or row.grid_key != key:
            return None
        path = self.cache_dir / row.file_name
        if not checksum_matches(path, row.checksum):
            logger.warning("cache entry for %s failed its checksum; retraining", subject_id)
            return None
        return load_model_file(path)

    def store(self, db: Session, model: MulticlassModel, data_hash: str, key: str, gamma: float) -> None:
        subject_id = model.subject_id
        path = self.model_path(subject_id)
        checksum = save_model_file(path, model)
        row = db.query(CachedSourceModel).filter_by(subject_id=subject_id).first()
        if not row:
            row = CachedSourceModel(subject_id=subject_id)
            db.add(row)
        row.data_hash = data_hash
        row.grid_key = key
        row.file_name = path.name
        row.checksum = checksum
        row.C = model.C
        row.gamma = gamma
        row.updated_at = now_local()
        db.commit()


def build_source_cache(
    cfg: ExperimentConfig,
    cohort: Optional[Cohort] = None,
    *,
    subjects: Optional[Sequence[str]] = None,
    classes: Optional[np.ndarray] = None,
    cache_dir: Optional[str | Path] = None,
) -> tuple[dict[str, MulticlassModel], CacheReport]:
    """Grid-search and train every source subject, reusing up-to-date entries."""
    cohort = cohort or Cohort(cfg)
    subjects = list(subjects if subjects is not None else cfg.sources)
    if classes is None:
        classes = cohort.class_set(subjects)
    cache = SourceCache(cache_dir or cfg.cache_dir or settings.cache_dir)
    grid = GridSpec(tuple(cfg.grid.C), tuple(cfg.grid.gamma))
    folds = resolve_folds(cfg)
    key = grid_key(grid, folds, classes)

    models: dict[str, MulticlassModel] = {}
    report = CacheReport()
    with cache.sessions() as db:
        for subject_id in subjects:
            data = cohort.subject(subject_id)
            row = db.query(CachedSourceModel).filter_by(subject_id=subject_id).first()
            model = cache.lookup(db, subject_id, data.data_hash, key)
            if model is not None:
                models[subject_id] = model
                report.reused.append(subject_id)
                continue
            if row and row.data_hash == data.data_hash and row.grid_key == key:
                report.corrupted.append(subject_id)
            found = grid_search(data.train, grid, folds, classes=classes)
            model = train_multiclass(
                data.train, KernelSpec.rbf(found.gamma), found.C, classes=classes, subject_id=subject_id
            )
            cache.store(db, model, data.data_hash, key, found.gamma)
            models[subject_id] = model
            report.trained.append(subject_id)
    logger.info(
        "source cache: %d trained, %d reused (%d corrupted entries replaced)",
        len(report.trained),
        len(report.reused),
        len(report.corrupted),
    )
    return models, report
