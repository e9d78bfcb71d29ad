import os
import threading
import time
from pathlib import Path
from typing import Any, Final

import msgspec
from msgspec import Struct


class JournalEvent(Struct, frozen=True, forbid_unknown_fields=True):
    event: str
    command: str
    run_id: str
    timestamp: float
    data: dict[str, Any] = {}


class RunJournal:
    """Append-only JSON-lines event log of one run directory."""

    __slots__ = ("_decoder", "_encoder", "_path_str", "_write_lock", "journal_file")

    def __init__(self, journal_file: Path) -> None:
        self.journal_file: Final[Path] = Path(journal_file)
        self._path_str: Final[str] = str(self.journal_file)
        self._write_lock: Final[threading.Lock] = threading.Lock()
        self._encoder: Final[msgspec.json.Encoder] = msgspec.json.Encoder()
        self._decoder: Final[msgspec.json.Decoder[JournalEvent]] = msgspec.json.Decoder(
            JournalEvent
        )

    def record(self, event: str, command: str, run_id: str, **data: Any) -> JournalEvent:
        entry = JournalEvent(event, command, run_id, time.time(), data)
        self.append(entry)
        return entry

    def append(self, entry: JournalEvent) -> None:
        line = self._encoder.encode(entry) + b"\n"
        self.journal_file.parent.mkdir(parents=True, exist_ok=True)
        with self._write_lock:
            fd = os.open(self._path_str, os.O_WRONLY | os.O_CREAT | os.O_APPEND, 0o644)
            try:
                os.write(fd, line)
                os.fsync(fd)
            finally:
                os.close(fd)

    def tail(self, n: int, max_buffer_bytes: int = 1_048_576) -> list[JournalEvent]:
        if n <= 0 or not self.journal_file.exists():
            return []
        with self._write_lock:
            return self._tail_reverse_seek(n, max_buffer_bytes)

    def _tail_reverse_seek(self, n: int, max_buffer_bytes: int) -> list[JournalEvent]:
        block_size = 4096
        with self.journal_file.open("rb") as f:
            f.seek(0, 2)
            position = f.tell()
            chunks: list[bytes] = []
            bytes_read = 0
            newlines = 0
            while position > 0 and bytes_read < max_buffer_bytes and newlines <= n:
                read_size = min(block_size, position)
                position -= read_size
                f.seek(position)
                chunk = f.read(read_size)
                chunks.append(chunk)
                bytes_read += read_size
                newlines += chunk.count(b"\n")

        events: list[JournalEvent] = []
        for line in b"".join(reversed(chunks)).split(b"\n"):
            line = line.strip()
            if not line:
                continue
            try:
                events.append(self._decoder.decode(line))
            except msgspec.DecodeError:
                # Partial first line of the window or a torn write.
                continue
        return events[-n:]
