"""Process-level settings."""

from __future__ import annotations

import os
from dataclasses import dataclass

from dotenv import load_dotenv

load_dotenv()


@dataclass(frozen=True)
class Settings:
    """Runtime settings read from the environment (and `.env`)."""

    cache_dir: str = os.getenv("EMG_TRANSFER_CACHE_DIR", "./.source_cache")
    log_level: str = os.getenv("EMG_TRANSFER_LOG_LEVEL", "INFO").upper()
    jobs: int = int(os.getenv("EMG_TRANSFER_JOBS", "1"))
    cv_folds: int = int(os.getenv("EMG_TRANSFER_CV_FOLDS", "5"))
    timezone: str = os.getenv("TIMEZONE", "UTC")


settings = Settings()
