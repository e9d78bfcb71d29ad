"""Named random substreams derived from one global seed."""

import hashlib
from typing import Final

import numpy as np

SEED_MAX: Final[int] = 2**64 - 1

STREAMS: Final[frozenset[str]] = frozenset(
    {"corpus", "split", "mining", "init", "training", "augment", "eval"}
)


def stream_key(name: str) -> int:
    digest = hashlib.sha256(name.encode("utf-8")).hexdigest()[:16]
    return int(digest, 16)


def substream(seed: int, name: str, *keys: int) -> np.random.Generator:
    if name not in STREAMS:
        raise ValueError(f"Unknown random stream: {name}")
    if seed < 0 or any(k < 0 for k in keys):
        raise ValueError("seed material must be non-negative")
    return np.random.default_rng([seed, stream_key(name), *keys])


def check_seed(seed: int, field: str = "seed") -> None:
    """Seeds are unsigned 64-bit integers."""
    if not 0 <= seed <= SEED_MAX:
        raise ValueError(f"{field} must be an unsigned 64-bit integer, got {seed}")
