"""SQLite index next to the cached source models."""

from __future__ import annotations

from functools import lru_cache
from pathlib import Path

from sqlalchemy import create_engine
from sqlalchemy.orm import declarative_base, sessionmaker

INDEX_FILE = "index.sqlite3"

Base = declarative_base()


def db_url(cache_dir: str | Path) -> str:
    return f"sqlite:///{Path(cache_dir).resolve() / INDEX_FILE}"


@lru_cache(maxsize=None)
def _session_factory(url: str) -> sessionmaker:
    # models must be imported so their tables exist on the metadata
    from emg_transfer import models  # noqa: F401

    engine = create_engine(url, connect_args={"check_same_thread": False})
    Base.metadata.create_all(engine)
    return sessionmaker(bind=engine, autoflush=False, autocommit=False)


def session_factory(cache_dir: str | Path) -> sessionmaker:
    """Session factory for the index in ``cache_dir``; tables are created on first use."""
    Path(cache_dir).mkdir(parents=True, exist_ok=True)
    return _session_factory(db_url(cache_dir))
