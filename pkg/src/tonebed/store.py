"""On-disk formats: SITF frame files, the JSONL manifest and atomic writes."""

import logging
import os
import struct
from collections.abc import Iterable, Sequence
from pathlib import Path
from typing import Final

import msgspec
import numpy as np
from numpy.typing import ArrayLike

from .corpus import Token, TokenRecord
from .numerics import Matrix

logger = logging.getLogger(__name__)

FRAMES_MAGIC: Final[bytes] = b"SITF"
_FRAMES_HEADER: Final[struct.Struct] = struct.Struct("<4sII")


class FormatError(ValueError):
    def __init__(self, path: Path | str, reason: str) -> None:
        super().__init__(f"{path}: {reason}")
        self.path = str(path)


def write_atomic(path: Path, data: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    temp_file = path.with_name(path.name + ".tmp")
    with temp_file.open("wb") as f:
        f.write(data)
        f.flush()
        os.fsync(f.fileno())
    temp_file.replace(path)


def encode_frames(frames: ArrayLike) -> bytes:
    matrix = np.asarray(frames)
    if matrix.ndim != 2:
        raise ValueError(f"frame matrix must be 2-D, got shape {matrix.shape}")
    n_frames, dim = matrix.shape
    body = np.ascontiguousarray(matrix, dtype="<f4").tobytes()
    return _FRAMES_HEADER.pack(FRAMES_MAGIC, n_frames, dim) + body


def decode_frames(data: bytes, source: Path | str = "<bytes>") -> Matrix:
    if len(data) < _FRAMES_HEADER.size:
        raise FormatError(source, "truncated header")
    magic, n_frames, dim = _FRAMES_HEADER.unpack_from(data)
    if magic != FRAMES_MAGIC:
        raise FormatError(source, f"bad magic {magic!r}")
    expected = _FRAMES_HEADER.size + 4 * n_frames * dim
    if len(data) != expected:
        raise FormatError(source, f"expected {expected} bytes, found {len(data)}")
    flat = np.frombuffer(data, dtype="<f4", offset=_FRAMES_HEADER.size)
    return flat.reshape(n_frames, dim).astype(np.float64)


def write_frames(path: Path, frames: ArrayLike) -> None:
    write_atomic(path, encode_frames(frames))


def read_frames(path: Path) -> Matrix:
    return decode_frames(path.read_bytes(), path)


def encode_manifest(records: Iterable[TokenRecord]) -> bytes:
    encoder = msgspec.json.Encoder()
    return b"".join(encoder.encode(r) + b"\n" for r in records)


def read_manifest(path: Path) -> list[TokenRecord]:
    decoder = msgspec.json.Decoder(TokenRecord)
    records: list[TokenRecord] = []
    for lineno, line in enumerate(path.read_bytes().split(b"\n"), start=1):
        if not line.strip():
            continue
        try:
            records.append(decoder.decode(line))
        except msgspec.DecodeError as e:
            raise FormatError(path, f"line {lineno}: {e}") from e
    return records


class CorpusStore:
    """A corpus directory: ``manifest.jsonl`` plus ``features/<id>.sitf``."""

    __slots__ = ("features_dir", "manifest_file", "root")

    def __init__(self, root: Path) -> None:
        self.root: Final[Path] = Path(root)
        self.manifest_file: Final[Path] = self.root / "manifest.jsonl"
        self.features_dir: Final[Path] = self.root / "features"

    def exists(self) -> bool:
        return self.manifest_file.exists()

    def feature_path(self, token_id: str) -> str:
        return f"features/{token_id}.sitf"

    def save(self, tokens: Sequence[Token]) -> list[TokenRecord]:
        ordered = sorted(tokens, key=lambda t: t.id)
        records = []
        for tok in ordered:
            rel = self.feature_path(tok.id)
            write_frames(self.root / rel, tok.features)
            records.append(tok.record(rel))
        write_atomic(self.manifest_file, encode_manifest(records))
        logger.info("saved %d tokens to %s", len(records), self.root)
        return records

    def load(self) -> list[Token]:
        if not self.exists():
            raise FileNotFoundError(self.manifest_file)
        tokens = []
        for rec in read_manifest(self.manifest_file):
            frames = read_frames(self.root / rec.feature_path)
            if frames.shape[0] != rec.n_frames:
                raise FormatError(
                    rec.feature_path,
                    f"manifest says {rec.n_frames} frames, file has {frames.shape[0]}",
                )
            tokens.append(
                Token(
                    id=rec.id,
                    word=rec.word,
                    base_word=rec.base_word,
                    tone=rec.tone,
                    speaker_id=rec.speaker_id,
                    gender=rec.gender,
                    features=frames,
                    split=rec.split,
                )
            )
        return tokens
