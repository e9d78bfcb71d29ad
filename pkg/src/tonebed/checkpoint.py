"""SITC checkpoint files.

Layout (little-endian):
    b"SITC" | u32 version | u32 header length | JSON header | u32 group count |
    per group: u32 name length | name (UTF-8) | u64 element count | f8 data
"""

import struct
from pathlib import Path
from typing import Final

import msgspec
import numpy as np
from msgspec import Struct

from .ctc import Vocabulary
from .encoder import EncoderStack, StackConfig, parameter_shapes
from .store import FormatError, write_atomic

CHECKPOINT_MAGIC: Final[bytes] = b"SITC"
CHECKPOINT_VERSION: Final[int] = 1

_U32: Final[struct.Struct] = struct.Struct("<I")
_U64: Final[struct.Struct] = struct.Struct("<Q")


class CheckpointHeader(Struct, frozen=True, forbid_unknown_fields=True):
    config: StackConfig
    vocabulary: Vocabulary
    n_tones: int
    feature_dim: int


def encode_checkpoint(stack: EncoderStack) -> bytes:
    header = msgspec.json.encode(
        CheckpointHeader(stack.config, stack.vocabulary, stack.n_tones, stack.feature_dim)
    )
    parts = [CHECKPOINT_MAGIC, _U32.pack(CHECKPOINT_VERSION), _U32.pack(len(header)), header]
    names = sorted(stack.params)
    parts.append(_U32.pack(len(names)))
    for name in names:
        raw = name.encode("utf-8")
        data = np.ascontiguousarray(stack.params[name], dtype="<f8")
        parts += [_U32.pack(len(raw)), raw, _U64.pack(data.size), data.tobytes()]
    return b"".join(parts)


class _Reader:
    __slots__ = ("data", "pos", "source")

    def __init__(self, data: bytes, source: Path | str) -> None:
        self.data = data
        self.pos = 0
        self.source = source

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError(self.source, "truncated checkpoint")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return _U32.unpack(self.take(_U32.size))[0]

    def u64(self) -> int:
        return _U64.unpack(self.take(_U64.size))[0]


def decode_checkpoint(data: bytes, source: Path | str = "<bytes>") -> EncoderStack:
    r = _Reader(data, source)
    if r.take(4) != CHECKPOINT_MAGIC:
        raise FormatError(source, "bad checkpoint magic")
    version = r.u32()
    if version != CHECKPOINT_VERSION:
        raise FormatError(source, f"unsupported checkpoint version {version}")
    try:
        header = msgspec.json.decode(r.take(r.u32()), type=CheckpointHeader)
    except msgspec.DecodeError as e:
        raise FormatError(source, f"bad header: {e}") from e

    shapes = parameter_shapes(
        header.config, header.feature_dim, header.vocabulary.size, header.n_tones
    )
    params: dict[str, np.ndarray] = {}
    for _ in range(r.u32()):
        name = r.take(r.u32()).decode("utf-8")
        count = r.u64()
        if name not in shapes:
            raise FormatError(source, f"unexpected parameter group {name}")
        if count != int(np.prod(shapes[name])):
            raise FormatError(source, f"{name}: element count {count} disagrees with config")
        flat = np.frombuffer(r.take(8 * count), dtype="<f8")
        params[name] = flat.astype(np.float64).reshape(shapes[name])
    if r.pos != len(data):
        raise FormatError(source, "trailing bytes after parameter groups")
    return EncoderStack(
        header.config, params, header.vocabulary, header.n_tones, header.feature_dim
    )


def save_checkpoint(path: Path, stack: EncoderStack) -> None:
    write_atomic(path, encode_checkpoint(stack))


def load_checkpoint(path: Path) -> EncoderStack:
    return decode_checkpoint(path.read_bytes(), path)
