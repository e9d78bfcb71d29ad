import argparse
import logging
import os
import sys
from collections.abc import Sequence
from pathlib import Path
from typing import cast

from . import __version__
from .checkpoint import load_checkpoint, save_checkpoint
from .config import (
    EVAL_KINDS,
    STAGES,
    ConfigError,
    EvalKind,
    RunConfig,
    RunPaths,
    Stage,
    load_config,
    save_config,
)
from .corpus import HeldOutSpeakerSplit, Token, count_by, generate, split
from .ctc import lexicon_for, load_lexicon, save_lexicon, vocabulary_for
from .distill import TeacherCache
from .encoder import EncoderStack
from .evaluation import (
    ANALYSIS_POOLING,
    RETRIEVAL_POOLING,
    cross_gender_retrieval,
    edit_rates,
    embed_tokens,
    layer_probe,
    project_2d,
    similarity_experiments,
    tone_cls_accuracy,
    tone_geometry,
    transcribe,
    unseen_speaker_retrieval,
)
from .journal import RunJournal
from .reports import (
    Table,
    asr_table,
    probe_table,
    projection_table,
    retrieval_table,
    similarity_table,
    tone_table,
    tonecls_table,
    trace_table,
    write_csv,
    write_summary,
)
from .seeding import SEED_MAX
from .store import CorpusStore
from .training import (
    TrainResult,
    build_teacher_cache,
    train_stage1,
    train_stage2,
    train_teacher,
)

LOG_LEVEL_ENV = "TONEBED_LOG_LEVEL"

EXIT_RUNTIME = 1
EXIT_PRECONDITION = 2

logger = logging.getLogger(__name__)


class PreconditionError(Exception):
    def __init__(self, path: Path, hint: str) -> None:
        super().__init__(f"missing {path} ({hint})")
        self.path = path


def configure_logging() -> None:
    name = os.environ.get(LOG_LEVEL_ENV, "WARNING").upper()
    level = logging.getLevelNamesMapping().get(name, logging.WARNING)
    logging.basicConfig(
        level=level,
        format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
        stream=sys.stderr,
    )


def resolve_config(args: argparse.Namespace) -> RunConfig:
    """--config wins; otherwise a run directory's own config.json; otherwise defaults."""
    if args.config is not None:
        cfg = load_config(Path(args.config))
    else:
        out = Path(args.out) if args.out is not None else Path(RunConfig().out_dir)
        saved = RunPaths(out).config
        cfg = load_config(saved) if saved.exists() else RunConfig()
    return cfg.with_overrides(seed=args.seed, out_dir=args.out)


def _require(path: Path, hint: str) -> Path:
    if not path.exists():
        raise PreconditionError(path, hint)
    return path


def _load_tokens(paths: RunPaths) -> list[Token]:
    _require(paths.manifest, "run `tonebed gen` first")
    return CorpusStore(paths.corpus).load()


def _test_tokens(tokens: Sequence[Token]) -> list[Token]:
    test = [t for t in tokens if t.split == "test"]
    if not test:
        raise ValueError("corpus has no test tokens")
    return test


def _fresh_stack(cfg: RunConfig, tokens: Sequence[Token]) -> EncoderStack:
    return EncoderStack.initialize(
        cfg.stack, tokens[0].features.shape[1], vocabulary_for(tokens), cfg.corpus.n_tones
    )


def _both_genders(tokens: Sequence[Token]) -> bool:
    return {t.gender for t in tokens} == {"F", "M"}


def _eval_stack(paths: RunPaths) -> EncoderStack:
    for stage in ("2", "1"):
        if paths.checkpoint(stage).exists():
            return load_checkpoint(paths.checkpoint(stage))
    raise PreconditionError(paths.checkpoint("1"), "run `tonebed train --stage 1` first")


# -- Commands --


def _cmd_gen(cfg: RunConfig, paths: RunPaths, journal: RunJournal) -> None:
    journal.record("start", "gen", cfg.run_id or "")
    tokens = split(generate(cfg.corpus, workers=cfg.workers), cfg.split)
    save_config(paths.config, cfg)
    CorpusStore(paths.corpus).save(tokens)
    save_lexicon(paths.lexicon, lexicon_for(tokens))

    print(f"Generated {len(tokens)} tokens in {paths.corpus}")
    for key in ("split", "gender", "tone"):
        counts = count_by(tokens, key)
        print(f"  {key:7} " + "  ".join(f"{k}={v}" for k, v in counts.items()))
    journal.record("finish", "gen", cfg.run_id or "", tokens=len(tokens))


def _save_trained(
    paths: RunPaths, stage: Stage, result: TrainResult, journal: RunJournal, run_id: str
) -> None:
    save_checkpoint(paths.checkpoint(stage), result.stack)
    write_csv(paths.trace(stage), trace_table(result.trace))
    final = result.losses[-1] if result.losses else None
    print(f"Stage {stage}: {len(result.trace)} steps, checkpoint {paths.checkpoint(stage)}")
    if final is not None:
        print(f"  initial loss {result.losses[0]:.6f}  final loss {final:.6f}")
    journal.record(
        "finish",
        f"train:{stage}",
        run_id,
        checkpoint=str(paths.checkpoint(stage)),
        steps=len(result.trace),
        final_loss=final,
    )


def _cmd_train(cfg: RunConfig, paths: RunPaths, journal: RunJournal, stage: Stage) -> None:
    run_id = cfg.run_id or ""
    tokens = _load_tokens(paths)
    journal.record("start", f"train:{stage}", run_id)
    match stage:
        case "1":
            result = train_stage1(
                tokens,
                _fresh_stack(cfg, tokens),
                cfg.stage1,
                cfg.optimizer,
                margin=cfg.margin,
                augment=cfg.augment,
                corpus_spec=cfg.corpus,
                seed=cfg.seed,
            )
        case "teacher":
            result = train_teacher(
                tokens,
                _fresh_stack(cfg, tokens),
                cfg.ctc_optimizer,
                augment=cfg.augment,
                seed=cfg.seed,
            )
            cached = build_teacher_cache(result.stack, tokens, TeacherCache(paths.teacher_cache))
            print(f"Cached teacher logits for {cached} tokens in {paths.teacher_cache}")
        case "2":
            stage1 = load_checkpoint(
                _require(paths.checkpoint("1"), "run `tonebed train --stage 1` first")
            )
            teacher = None
            if cfg.kd.uses_teacher:
                _require(paths.teacher_cache, "run `tonebed train --stage teacher` first")
                teacher = TeacherCache(paths.teacher_cache)
            result = train_stage2(
                tokens,
                stage1,
                teacher,
                cfg.kd,
                cfg.ctc_optimizer,
                augment=cfg.augment,
                seed=cfg.seed,
            )
    _save_trained(paths, stage, result, journal, run_id)


def _evaluate(
    kind: EvalKind,
    cfg: RunConfig,
    tokens: list[Token],
    stack: EncoderStack,
    lexicon: Sequence[str],
) -> Table:
    test = _test_tokens(tokens)
    layer = stack.config.feature_layer
    match kind:
        case "retrieval":
            Z = embed_tokens(stack, test, layer, RETRIEVAL_POOLING)
            unseen = None
            if isinstance(cfg.split, HeldOutSpeakerSplit):
                everything = embed_tokens(stack, tokens, layer, RETRIEVAL_POOLING)
                unseen = unseen_speaker_retrieval(tokens, everything, cfg.split.speaker_id)
            cross = cross_gender_retrieval(test, Z) if _both_genders(test) else None
            return retrieval_table(cross, unseen)
        case "tone":
            Z = embed_tokens(stack, test, layer, ANALYSIS_POOLING)
            return tone_table(tone_geometry(test, Z))
        case "asr":
            refs = [t.word for t in test]
            scores = {
                decoder: edit_rates(
                    transcribe(
                        stack,
                        test,
                        decoder=decoder,
                        lexicon=lexicon,
                        beam_width=cfg.evaluation.beam_width,
                    ),
                    refs,
                )
                for decoder in dict.fromkeys((cfg.evaluation.decoder, "beam", "greedy"))
            }
            return asr_table(scores)
        case "sim":
            return similarity_table(
                similarity_experiments(
                    test, stack, shifts=cfg.evaluation.pitch_shifts, seed=cfg.seed
                )
            )
        case "probe":
            return probe_table(layer_probe(test, stack))
        case "tonecls":
            return tonecls_table(tone_cls_accuracy(test, stack))


def _cmd_eval(cfg: RunConfig, paths: RunPaths, journal: RunJournal, kind: str) -> None:
    run_id = cfg.run_id or ""
    tokens = _load_tokens(paths)
    stack = _eval_stack(paths)
    lexicon = load_lexicon(paths.lexicon) if paths.lexicon.exists() else lexicon_for(tokens)
    kinds = cfg.evaluation.kinds if kind == "all" else (cast(EvalKind, kind),)
    for k in kinds:
        journal.record("start", f"eval:{k}", run_id)
        table = _evaluate(k, cfg, tokens, stack, lexicon)
        out = paths.eval_report(k)
        write_csv(out, table)
        print(f"Wrote {out}")
        journal.record("finish", f"eval:{k}", run_id, report=str(out), rows=len(table[1]))


def _cmd_report(cfg: RunConfig, paths: RunPaths, journal: RunJournal) -> None:
    run_id = cfg.run_id or ""
    reports = {k: paths.eval_report(k) for k in EVAL_KINDS if paths.eval_report(k).exists()}
    if not reports:
        raise PreconditionError(paths.eval_dir, "run `tonebed eval` first")
    n = write_summary(paths.summary, run_id, reports)
    print(f"Wrote {paths.summary} ({n} rows from {len(reports)} reports)")

    if paths.manifest.exists() and (
        paths.checkpoint("2").exists() or paths.checkpoint("1").exists()
    ):
        stack = _eval_stack(paths)
        test = _test_tokens(_load_tokens(paths))
        Z = embed_tokens(stack, test, stack.config.feature_layer, ANALYSIS_POOLING)
        projection = project_2d(Z, seed=cfg.seed)
        write_csv(paths.projection, projection_table(test, projection))
        print(f"Wrote {paths.projection}")
    journal.record("finish", "report", run_id, summary=str(paths.summary), rows=n)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=str, default=None, help="Run config JSON")
    common.add_argument("--out", type=str, default=None, help="Run directory (overrides config)")
    common.add_argument(
        "--seed",
        type=int,
        default=None,
        help="Global seed (overrides config)",
    )

    parser = argparse.ArgumentParser(
        prog="tonebed",
        description="Speaker-invariant, tone-aware word embeddings on a synthetic tonal corpus",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    subparsers = parser.add_subparsers(dest="command", required=True)

    subparsers.add_parser("gen", parents=[common], help="Generate and split the corpus")

    train = subparsers.add_parser("train", parents=[common], help="Train one stage")
    train.add_argument("--stage", choices=STAGES, required=True)

    ev = subparsers.add_parser("eval", parents=[common], help="Run an evaluation")
    ev.add_argument("--kind", choices=(*EVAL_KINDS, "all"), required=True)

    subparsers.add_parser("report", parents=[common], help="Summarize eval reports")
    return parser


def main(argv: Sequence[str] | None = None) -> None:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.seed is not None and not 0 <= args.seed <= SEED_MAX:
        parser.error("--seed must be an unsigned 64-bit integer")
    configure_logging()

    try:
        cfg = resolve_config(args)
        paths = RunPaths(cfg.out_dir)
        journal = RunJournal(paths.journal)
        match args.command:
            case "gen":
                _cmd_gen(cfg, paths, journal)
            case "train":
                _cmd_train(cfg, paths, journal, args.stage)
            case "eval":
                _cmd_eval(cfg, paths, journal, args.kind)
            case "report":
                _cmd_report(cfg, paths, journal)
    except (PreconditionError, ConfigError) as e:
        print(f"Error: {e}", file=sys.stderr)
        sys.exit(EXIT_PRECONDITION)
    except (ValueError, OSError) as e:
        logger.debug("command failed", exc_info=True)
        print(f"Error: {e}", file=sys.stderr)
        sys.exit(EXIT_RUNTIME)
