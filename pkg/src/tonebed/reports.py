"""CSV reports: loss traces, one table per evaluation kind, the run summary."""

import csv
import io
import logging
from collections.abc import Iterable, Mapping, Sequence
from pathlib import Path
from typing import Final

from .corpus import Token
from .evaluation import (
    AsrScore,
    CrossGenderRetrieval,
    Projection,
    ProbeRow,
    RetrievalResult,
    SimilarityScores,
    Stat,
    ToneAccuracy,
    ToneGeometry,
)
from .store import write_atomic
from .training import TraceRow

logger = logging.getLogger(__name__)

type Cell = str | int | float | None
type Table = tuple[tuple[str, ...], list[tuple[Cell, ...]]]

SUMMARY_HEADER: Final[tuple[str, ...]] = ("run_id", "kind", "metric", "value")


def format_cell(value: Cell) -> str:
    match value:
        case None:
            return ""
        case bool():
            return str(int(value))
        case int():
            return str(value)
        case float():
            return f"{value:.6f}"
        case _:
            return str(value)


def encode_csv(header: Sequence[str], rows: Iterable[Sequence[Cell]]) -> bytes:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        if len(row) != len(header):
            raise ValueError(f"row has {len(row)} cells, header has {len(header)}")
        writer.writerow([format_cell(v) for v in row])
    return buf.getvalue().encode("utf-8")


def write_csv(path: Path, table: Table) -> None:
    header, rows = table
    write_atomic(path, encode_csv(header, rows))
    logger.info("wrote %s (%d rows)", path, len(rows))


def read_csv(path: Path) -> tuple[list[str], list[list[str]]]:
    with path.open(newline="", encoding="utf-8") as f:
        rows = list(csv.reader(f))
    if not rows:
        raise ValueError(f"{path}: empty CSV")
    return rows[0], rows[1:]


# -- Tables --


def trace_table(trace: Sequence[TraceRow]) -> Table:
    components = sorted({k for row in trace for k in row.components})
    header = ("step", "loss", *components, "grad_norm", "learning_rate")
    rows = [
        (
            row.step,
            row.loss,
            *(row.components.get(k) for k in components),
            row.grad_norm,
            row.learning_rate,
        )
        for row in trace
    ]
    return header, rows


def retrieval_table(
    cross_gender: CrossGenderRetrieval | None, unseen: RetrievalResult | None = None
) -> Table:
    header = ("direction", "top1", "top5", "n_queries")
    rows: list[tuple[Cell, ...]] = []
    if cross_gender is not None:
        rows += [
            (r.direction, r.top1, r.top5, len(r.ranks))
            for r in (cross_gender.f_to_m, cross_gender.m_to_f)
        ]
        rows.append(("avg", cross_gender.avg_top1, cross_gender.avg_top5, None))
    if unseen is not None:
        rows.append((f"unseen:{unseen.direction}", unseen.top1, unseen.top5, len(unseen.ranks)))
    return header, rows


def _stat_cells(stat: Stat | None) -> tuple[Cell, Cell, Cell]:
    return (None, None, 0) if stat is None else (stat.mean, stat.std, stat.n)


def tone_table(geometry: ToneGeometry) -> Table:
    header = ("scope",) + tuple(
        f"{name}_{part}"
        for name in ("pos_sim", "hard_neg_dist", "soft_neg_dist")
        for part in ("mean", "std", "n")
    )

    def row(scope: str, g: ToneGeometry) -> tuple[Cell, ...]:
        return (
            scope,
            *_stat_cells(g.pos_sim),
            *_stat_cells(g.hard_neg_dist),
            *_stat_cells(g.soft_neg_dist),
        )

    rows = [row("all", geometry)]
    for tone, g in sorted((geometry.per_tone or {}).items()):
        rows.append(row(f"tone{tone}", g))
    return header, rows


def asr_table(scores: Mapping[str, AsrScore]) -> Table:
    header = (
        "decoder",
        "cer",
        "wer",
        "word_sub",
        "word_del",
        "word_ins",
        "n_words",
        "char_sub",
        "char_del",
        "char_ins",
        "n_chars",
    )
    rows = [
        (
            decoder,
            s.cer,
            s.wer,
            s.word_edits.substitutions,
            s.word_edits.deletions,
            s.word_edits.insertions,
            s.n_words,
            s.char_edits.substitutions,
            s.char_edits.deletions,
            s.char_edits.insertions,
            s.n_chars,
        )
        for decoder, s in scores.items()
    ]
    return header, rows


def similarity_table(scores: SimilarityScores) -> Table:
    rows: list[tuple[Cell, ...]] = [
        ("e1", scores.e1),
        ("e2", scores.e2),
        ("e3", scores.e3),
        ("e4", scores.e4),
    ]
    for shift, value in sorted((scores.e2_by_shift or {}).items()):
        rows.append((f"e2@{shift:+g}", value))
    return ("experiment", "value"), rows


def probe_table(rows: Sequence[ProbeRow]) -> Table:
    return ("layer", "avg_top1", "hard_neg_dist"), [
        (r.layer, r.avg_top1, r.hard_neg_dist) for r in rows
    ]


def tonecls_table(acc: ToneAccuracy) -> Table:
    rows: list[tuple[Cell, ...]] = [("all", acc.top1, acc.top3, acc.n)]
    for tone, top1 in acc.per_tone.items():
        rows.append((f"tone{tone}", top1, None, None))
    return ("scope", "top1", "top3", "n"), rows


def projection_table(tokens: Sequence[Token], projection: Projection) -> Table:
    header = ("token_id", "word", "base_word", "tone", "speaker_id", "gender", "x", "y")
    rows = [
        (t.id, t.word, t.base_word, t.tone, t.speaker_id, t.gender, x, y)
        for t, (x, y) in zip(tokens, projection.coords, strict=True)
    ]
    return header, rows


# -- Summary --


def summary_rows(run_id: str, reports: Mapping[str, Path]) -> list[tuple[str, ...]]:
    """Long-format rows; the first column of each report keys its row, blank cells are skipped."""
    out: list[tuple[str, ...]] = []
    for kind, path in reports.items():
        header, rows = read_csv(path)
        for row in rows:
            key = row[0]
            for column, value in zip(header[1:], row[1:], strict=True):
                if value:
                    out.append((run_id, kind, f"{key}.{column}", value))
    return out


def write_summary(path: Path, run_id: str, reports: Mapping[str, Path]) -> int:
    rows = summary_rows(run_id, reports)
    write_atomic(path, encode_csv(SUMMARY_HEADER, rows))
    return len(rows)
