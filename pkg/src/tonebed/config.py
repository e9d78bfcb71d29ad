"""Run configuration: one JSON document, decoded strictly, with a derived run id."""

import hashlib
from pathlib import Path
from typing import Annotated, Final, Literal, Self

import msgspec
from msgspec import Meta, Struct

from .corpus import AugmentConfig, CorpusSpec, CoverageSplit, Seed, SplitPolicy
from .ctc import DEFAULT_BEAM_WIDTH
from .distill import KdConfig
from .encoder import StackConfig
from .evaluation import PITCH_SHIFTS
from .losses import MarginConfig, Stage1Config
from .optim import OptimizerConfig
from .seeding import check_seed
from .store import write_atomic

type EvalKind = Literal["retrieval", "tone", "asr", "sim", "probe", "tonecls"]
type Stage = Literal["1", "2", "teacher"]

EVAL_KINDS: Final[tuple[EvalKind, ...]] = ("retrieval", "tone", "asr", "sim", "probe", "tonecls")
STAGES: Final[tuple[Stage, ...]] = ("1", "2", "teacher")


class ConfigError(ValueError):
    def __init__(self, source: Path | str, reason: str) -> None:
        super().__init__(f"invalid config {source}: {reason}")


class EvalConfig(Struct, frozen=True, forbid_unknown_fields=True):
    kinds: tuple[EvalKind, ...] = EVAL_KINDS
    decoder: Literal["beam", "greedy"] = "beam"
    beam_width: Annotated[int, Meta(ge=1)] = DEFAULT_BEAM_WIDTH
    pitch_shifts: tuple[float, ...] = PITCH_SHIFTS


class RunConfig(Struct, frozen=True, forbid_unknown_fields=True):
    """Everything a run depends on. ``margin`` set selects the margin tone loss."""

    corpus: CorpusSpec = CorpusSpec(n_tones=4)
    stack: StackConfig = StackConfig()
    stage1: Stage1Config = Stage1Config()
    margin: MarginConfig | None = None
    kd: KdConfig = KdConfig()
    optimizer: OptimizerConfig = OptimizerConfig()
    stage2_optimizer: OptimizerConfig | None = None
    augment: AugmentConfig = AugmentConfig()
    split: SplitPolicy = CoverageSplit()
    evaluation: EvalConfig = EvalConfig()
    out_dir: str = "runs/default"
    seed: Seed = 42
    run_id: str | None = None
    workers: Annotated[int, Meta(ge=1)] = 1

    def __post_init__(self) -> None:
        check_seed(self.seed)
        if self.stack.D_hidden < self.corpus.feature_dim:
            raise ValueError(
                f"stack.D_hidden ({self.stack.D_hidden}) must be at least "
                f"corpus.feature_dim ({self.corpus.feature_dim})"
            )
        if self.run_id is None:
            msgspec.structs.force_setattr(self, "run_id", derive_run_id(self))

    @property
    def loss_variant(self) -> Literal["infonce", "margin"]:
        return "infonce" if self.margin is None else "margin"

    @property
    def ctc_optimizer(self) -> OptimizerConfig:
        return self.stage2_optimizer or self.optimizer

    def with_overrides(self, *, seed: int | None = None, out_dir: str | None = None) -> Self:
        """Apply CLI overrides; a new seed reseeds every component and the run id."""
        cfg = self
        if seed is not None:
            split = cfg.split
            if isinstance(split, CoverageSplit):
                split = CoverageSplit(seed=seed)
            cfg = msgspec.structs.replace(
                cfg,
                seed=seed,
                corpus=msgspec.structs.replace(cfg.corpus, seed=seed),
                stack=msgspec.structs.replace(cfg.stack, seed=seed),
                split=split,
                run_id=None,
            )
            if cfg.run_id is None:
                cfg = msgspec.structs.replace(cfg, run_id=derive_run_id(cfg))
        if out_dir is not None:
            cfg = msgspec.structs.replace(cfg, out_dir=out_dir)
        return cfg


def encode_config(cfg: RunConfig) -> bytes:
    """Canonical JSON; ``out_dir`` and ``run_id`` do not take part in the run identity."""
    return msgspec.json.encode(msgspec.structs.replace(cfg, out_dir="", run_id="")) + b"\n"


def derive_run_id(cfg: RunConfig) -> str:
    return hashlib.sha256(encode_config(cfg)).hexdigest()[:16]


def decode_config(data: bytes, source: Path | str = "<bytes>") -> RunConfig:
    try:
        return msgspec.json.decode(data, type=RunConfig)
    except (msgspec.DecodeError, ValueError) as e:
        raise ConfigError(source, str(e)) from e


def load_config(path: Path) -> RunConfig:
    try:
        data = Path(path).read_bytes()
    except OSError as e:
        raise ConfigError(path, e.strerror or str(e)) from e
    return decode_config(data, path)


def dump_config(cfg: RunConfig) -> bytes:
    return msgspec.json.format(msgspec.json.encode(cfg), indent=2) + b"\n"


def save_config(path: Path, cfg: RunConfig) -> None:
    write_atomic(path, dump_config(cfg))


class RunPaths:
    """File layout of one run directory."""

    __slots__ = ("root",)

    def __init__(self, root: Path | str) -> None:
        self.root: Final[Path] = Path(root)

    @property
    def config(self) -> Path:
        return self.root / "config.json"

    @property
    def corpus(self) -> Path:
        return self.root / "corpus"

    @property
    def manifest(self) -> Path:
        return self.corpus / "manifest.jsonl"

    @property
    def lexicon(self) -> Path:
        return self.corpus / "lexicon.txt"

    def checkpoint(self, stage: Stage) -> Path:
        name = "teacher" if stage == "teacher" else f"stage{stage}"
        return self.root / "checkpoints" / f"{name}.sitc"

    def trace(self, stage: Stage) -> Path:
        name = "teacher" if stage == "teacher" else f"stage{stage}"
        return self.root / "traces" / f"{name}.csv"

    @property
    def teacher_cache(self) -> Path:
        return self.root / "teacher_cache"

    @property
    def eval_dir(self) -> Path:
        return self.root / "eval"

    def eval_report(self, kind: EvalKind) -> Path:
        return self.eval_dir / f"{kind}.csv"

    @property
    def summary(self) -> Path:
        return self.root / "report" / "summary.csv"

    @property
    def projection(self) -> Path:
        return self.root / "report" / "projection.csv"

    @property
    def journal(self) -> Path:
        return self.root / "events.jsonl"
