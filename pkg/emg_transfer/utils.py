"""Small shared helpers: label mapping, hashing, seeds."""

from __future__ import annotations

import hashlib
import hmac
from pathlib import Path
from typing import Iterable

import numpy as np

REST_LABEL = 0

# Internal labels are 0-based with rest = 0; reports use 1-based labels where
# label 1 is rest.
REPORTED_LABEL_OFFSET = 1


def to_reported_label(label: int) -> int:
    """Internal 0-based class id -> reported 1-based label (rest -> 1)."""
    return int(label) + REPORTED_LABEL_OFFSET


def from_reported_label(label: int) -> int:
    """Reported 1-based label -> internal 0-based class id."""
    if int(label) < REPORTED_LABEL_OFFSET:
        raise ValueError(f"reported labels start at {REPORTED_LABEL_OFFSET}, got {label}")
    return int(label) - REPORTED_LABEL_OFFSET


def label_mapping_table(class_count: int) -> list[tuple[int, int]]:
    """Pairs (internal, reported) for every class."""
    return [(g, to_reported_label(g)) for g in range(class_count)]


def hash_arrays(*arrays: np.ndarray, extra: Iterable[str] = ()) -> str:
    """SHA-256 over array bytes (dtype and shape included) and extra tokens."""
    digest = hashlib.sha256()
    for arr in arrays:
        a = np.ascontiguousarray(arr)
        digest.update(str(a.dtype).encode())
        digest.update(str(a.shape).encode())
        digest.update(a.tobytes())
    for token in extra:
        digest.update(b"\x00")
        digest.update(str(token).encode())
    return digest.hexdigest()


def file_checksum(path: str | Path) -> str:
    """SHA-256 of a file's content."""
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            digest.update(chunk)
    return digest.hexdigest()


def checksum_matches(path: str | Path, expected: str | None) -> bool:
    """True when the file exists and its SHA-256 equals ``expected``."""
    if not expected:
        return False
    try:
        actual = file_checksum(path)
    except OSError:
        return False
    return hmac.compare_digest(actual, expected)


def derive_seed(base_seed: int, *tokens: int | str) -> int:
    """Deterministic child seed from a base seed and identifying tokens."""
    entropy = [int(base_seed) & 0xFFFFFFFFFFFFFFFF]
    for token in tokens:
        if isinstance(token, str):
            entropy.append(int.from_bytes(hashlib.sha256(token.encode()).digest()[:8], "little"))
        else:
            entropy.append(int(token))
    return int(np.random.SeedSequence(entropy).generate_state(1, dtype=np.uint64)[0])
