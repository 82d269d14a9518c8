"""Zone-aware timestamps for run manifests and cache rows."""

from __future__ import annotations

import datetime as dt
import logging
from zoneinfo import ZoneInfo, ZoneInfoNotFoundError

from emg_transfer.config import settings

logger = logging.getLogger(__name__)

FALLBACK_ZONE = "UTC"


def resolve_zone(name: str | None) -> tuple[ZoneInfo, str]:
    """``ZoneInfo`` for ``name``; unknown or empty names fall back to UTC."""
    if name:
        try:
            return ZoneInfo(name), name
        except (ZoneInfoNotFoundError, ValueError):
            logger.warning("unknown timezone %r, using %s", name, FALLBACK_ZONE)
    return ZoneInfo(FALLBACK_ZONE), FALLBACK_ZONE


TZ, TZ_NAME = resolve_zone(settings.timezone)


def now_local() -> dt.datetime:
    return dt.datetime.now(tz=TZ)


def stamp(moment: dt.datetime | None = None) -> str:
    """ISO-8601 with seconds and UTC offset."""
    return (moment or now_local()).isoformat(timespec="seconds")
