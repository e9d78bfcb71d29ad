"""Stage-1 contrastive training, Stage-2 CTC + KD fine-tuning, and the CTC teacher."""

import logging
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field

import numpy as np
from msgspec import Struct

from .corpus import (
    AugmentConfig,
    CorpusSpec,
    PairIndex,
    PairSet,
    Token,
    UnusableAnchorError,
    mine_pairs,
    mine_tone_sets,
    transplant_views,
)
from .ctc import ctc_loss
from .distill import KdConfig, TeacherCache, kd_loss, stage2_loss
from .encoder import (
    EncoderStack,
    FrameBatch,
    stage1_groups,
    stage2_groups,
    teacher_groups,
)
from .evaluation import ANALYSIS_POOLING, RETRIEVAL_POOLING
from .losses import LossReport, MarginConfig, Stage1Config, stage1_loss
from .numerics import PoolingMode, l2_normalize, normalize_backward, pool, pool_backward
from .optim import AdamW, GradientAccumulator, OptimizerConfig
from .seeding import stream_key, substream

logger = logging.getLogger(__name__)

LOG_EVERY = 100


class TraceRow(Struct, frozen=True):
    step: int
    loss: float
    components: dict[str, float]
    grad_norm: float
    learning_rate: float


@dataclass(slots=True)
class TrainResult:
    stack: EncoderStack
    trace: list[TraceRow] = field(default_factory=list)

    @property
    def losses(self) -> list[float]:
        return [row.loss for row in self.trace]


def _train_split(tokens: Sequence[Token]) -> list[Token]:
    train = [t for t in tokens if t.split == "train"]
    if not train:
        raise ValueError("no training tokens")
    return sorted(train, key=lambda t: t.id)


def _mean_components(parts: list[dict[str, float]]) -> dict[str, float]:
    keys = sorted({k for p in parts for k in p})
    return {k: float(np.mean([p.get(k, 0.0) for p in parts])) for k in keys}


def _log_progress(stage: str, row: TraceRow, total: int) -> None:
    if row.step % LOG_EVERY == 0 or row.step == total - 1:
        logger.info(
            "%s step %d/%d loss=%.4f grad_norm=%.3f",
            stage,
            row.step + 1,
            total,
            row.loss,
            row.grad_norm,
        )


# -- Stage 1 --


def usable_anchors(index: PairIndex) -> list[str]:
    """Tokens whose word has at least one other recording."""
    words: dict[str, int] = {}
    for tok in index.tokens.values():
        words[tok.word] = words.get(tok.word, 0) + 1
    return [tid for tid, tok in index.tokens.items() if words[tok.word] >= 2]


def mine_batch(
    index: PairIndex,
    anchor_ids: Sequence[str],
    cfg: Stage1Config,
    seed_material: Sequence[int],
) -> list[PairSet]:
    batch = []
    for j, anchor_id in enumerate(anchor_ids):
        rng_seed = [*seed_material, j]
        try:
            ps = mine_pairs(
                index,
                anchor_id,
                cfg.N,
                rng_seed,
                max_positives=cfg.max_positives,
                n_soft=cfg.soft_cap,
            )
        except UnusableAnchorError:
            ps = mine_tone_sets(
                index, anchor_id, rng_seed, max_positives=cfg.max_positives, n_soft=cfg.soft_cap
            )
        batch.append(ps)
    return batch


def stage1_gradients(
    stack: EncoderStack,
    features: Mapping[str, np.ndarray],
    batch: Sequence[PairSet],
    tones: Mapping[str, int],
    cfg: Stage1Config,
    *,
    margin: MarginConfig | None = None,
    speaker_pooling: PoolingMode = RETRIEVAL_POOLING,
    tone_pooling: PoolingMode = ANALYSIS_POOLING,
) -> tuple[LossReport, dict[str, np.ndarray]]:
    """Loss over one mined batch and parameter gradients for the Stage-1 groups.

    The speaker term sees embeddings pooled with ``speaker_pooling`` and the
    tone terms embeddings pooled with ``tone_pooling``; both views share the
    same hidden states, so their gradients add up frame by frame.
    """
    ids = sorted({m for ps in batch for m in ps.members()})
    frames = FrameBatch.of([features[i] for i in ids])
    layer = stack.config.feature_layer
    cache = stack.run(frames.frames, layer)
    h = cache.top

    views = {"emb": speaker_pooling, "tone_emb": tone_pooling}
    pooled = {
        key: [pool(frames.segment(i, h), mode).values for i in range(len(ids))]
        for key, mode in views.items()
    }
    embeddings = {
        key: {tid: l2_normalize(v).values for tid, v in zip(ids, vs, strict=True)}
        for key, vs in pooled.items()
    }
    report = stage1_loss(
        batch,
        embeddings["emb"],
        tones,
        stack.tone_head,
        cfg,
        margin=margin,
        tone_embeddings=embeddings["tone_emb"],
    )

    grad_h = np.zeros_like(h)
    for i, tid in enumerate(ids):
        lo, hi = frames.offsets[i], frames.offsets[i + 1]
        for key, mode in views.items():
            g = report.grads.get(f"{key}/{tid}")
            if g is None:
                continue
            dv = normalize_backward(pooled[key][i], g)
            grad_h[lo:hi] += pool_backward(h[lo:hi], mode, dv)

    grads = stack.backward(cache, grad_h, stack.config.frozen_blocks + 1)
    grads["tone_head.W"] = report.grads["tone_head.W"]
    grads["tone_head.b"] = report.grads["tone_head.b"]
    return report, grads


def train_stage1(
    tokens: Sequence[Token],
    stack: EncoderStack,
    cfg: Stage1Config,
    opt: OptimizerConfig,
    *,
    margin: MarginConfig | None = None,
    augment: AugmentConfig | None = None,
    speaker_pooling: PoolingMode = RETRIEVAL_POOLING,
    tone_pooling: PoolingMode = ANALYSIS_POOLING,
    corpus_spec: CorpusSpec | None = None,
    seed: int = 0,
) -> TrainResult:
    """Update blocks B_frozen+1..feature_layer and the tone head; nothing else moves."""
    augment = augment or AugmentConfig()
    pool_tokens = _train_split(tokens)
    if augment.transplant_pool:
        if corpus_spec is None:
            raise ValueError("speaker transplant needs the corpus spec")
        pool_tokens += transplant_views(tokens, corpus_spec, augment.transplant_pool)
    index = PairIndex(pool_tokens)
    anchors = usable_anchors(index)
    if not anchors:
        raise ValueError("no usable anchors in the training split")
    tones = {tid: tok.tone for tid, tok in index.tokens.items()}

    stack = stack.copy()
    groups = stage1_groups(stack.config)
    optimizer = AdamW(opt, groups)
    result = TrainResult(stack)
    batch_size = min(opt.batch_size, len(anchors))
    mining_key = stream_key("mining")
    logger.info(
        "stage 1: %d pool tokens, %d anchors, %d steps",
        len(index.tokens),
        len(anchors),
        opt.total_steps,
    )

    for step in range(opt.total_steps):
        acc = GradientAccumulator(groups)
        values: list[float] = []
        parts: list[dict[str, float]] = []
        for micro in range(opt.accumulation_steps):
            rng = substream(seed, "training", 1, step, micro)
            chosen = sorted(rng.choice(len(anchors), size=batch_size, replace=False))
            batch = mine_batch(
                index, [anchors[a] for a in chosen], cfg, [seed, mining_key, step, micro]
            )
            aug_rng = substream(seed, "augment", 1, step, micro)
            members = sorted({m for ps in batch for m in ps.members()})
            features = {m: augment.draw(index.tokens[m], aug_rng).features for m in members}
            report, grads = stage1_gradients(
                stack,
                features,
                batch,
                tones,
                cfg,
                margin=margin,
                speaker_pooling=speaker_pooling,
                tone_pooling=tone_pooling,
            )
            acc.add(grads)
            values.append(report.value)
            parts.append(report.components)
        stats = optimizer.step(stack.params, acc.release())
        row = TraceRow(
            step,
            float(np.mean(values)),
            _mean_components(parts),
            stats.grad_norm,
            stats.learning_rate,
        )
        result.trace.append(row)
        _log_progress("stage 1", row, opt.total_steps)
    return result


# -- Stage 2 and the teacher --


def _train_ctc(
    tokens: Sequence[Token],
    stack: EncoderStack,
    groups: Sequence[str],
    lowest: int,
    opt: OptimizerConfig,
    *,
    kd: KdConfig,
    teacher_logits: Mapping[str, np.ndarray],
    augment: AugmentConfig,
    seed: int,
    stage: str,
    stream: int,
) -> TrainResult:
    train = _train_split(tokens)
    targets = {t.id: stack.vocabulary.encode(t.word) for t in train}
    optimizer = AdamW(opt, groups)
    result = TrainResult(stack)
    batch_size = min(opt.batch_size, len(train))
    M = stack.config.M
    logger.info("%s: %d tokens, %d steps", stage, len(train), opt.total_steps)

    for step in range(opt.total_steps):
        acc = GradientAccumulator(groups)
        values: list[float] = []
        parts: list[dict[str, float]] = []
        for micro in range(opt.accumulation_steps):
            rng = substream(seed, "training", stream, step, micro)
            picks = sorted(rng.choice(len(train), size=batch_size, replace=False))
            chosen = [train[i] for i in picks]
            aug_rng = substream(seed, "augment", stream, step, micro)
            frames = FrameBatch.of(
                [augment.draw(t, aug_rng, allow_stretch=False).features for t in chosen]
            )
            cache = stack.run(frames.frames, M)
            h_top = cache.top
            logits = stack.ctc_logits(h_top)

            grad_logits = np.zeros_like(logits)
            batch_value = 0.0
            batch_parts: list[dict[str, float]] = []
            for i, tok in enumerate(chosen):
                lo, hi = frames.offsets[i], frames.offsets[i + 1]
                value, g = ctc_loss(logits[lo:hi], targets[tok.id])
                ctc = LossReport(value, {"student_logits": g})
                distill = (
                    kd_loss(teacher_logits[tok.id], logits[lo:hi], kd) if kd.uses_teacher else None
                )
                rep = stage2_loss(ctc, distill, kd)
                grad_logits[lo:hi] = rep.grads["student_logits"] / batch_size
                batch_value += rep.value / batch_size
                batch_parts.append(rep.components)

            grads = stack.backward(cache, grad_logits @ stack.params["ctc_head.W"].T, lowest)
            grads["ctc_head.W"] = h_top.T @ grad_logits
            grads["ctc_head.b"] = grad_logits.sum(axis=0)
            acc.add(grads)
            values.append(batch_value)
            parts.append(_mean_components(batch_parts))
        stats = optimizer.step(stack.params, acc.release())
        row = TraceRow(
            step,
            float(np.mean(values)),
            _mean_components(parts),
            stats.grad_norm,
            stats.learning_rate,
        )
        result.trace.append(row)
        _log_progress(stage, row, opt.total_steps)
    return result


def train_stage2(
    tokens: Sequence[Token],
    stack: EncoderStack,
    teacher: TeacherCache | None,
    kd: KdConfig,
    opt: OptimizerConfig,
    *,
    augment: AugmentConfig | None = None,
    seed: int = 0,
) -> TrainResult:
    """Update blocks feature_layer+1..M and the CTC head; layer-ℓ embeddings stay fixed."""
    teacher_logits: dict[str, np.ndarray] = {}
    if kd.uses_teacher:
        if teacher is None or not teacher.exists():
            raise ValueError("teacher logits required when delta < 1")
        teacher_logits = {t.id: teacher.load(t.id) for t in _train_split(tokens)}
    stack = stack.copy()
    cfg = stack.config
    return _train_ctc(
        tokens,
        stack,
        stage2_groups(cfg),
        cfg.feature_layer + 1,
        opt,
        kd=kd,
        teacher_logits=teacher_logits,
        augment=augment or AugmentConfig(),
        seed=seed,
        stage="stage 2",
        stream=2,
    )


def train_teacher(
    tokens: Sequence[Token],
    stack: EncoderStack,
    opt: OptimizerConfig,
    *,
    augment: AugmentConfig | None = None,
    seed: int = 0,
) -> TrainResult:
    """CTC-only fine-tuning of blocks B_frozen+1..M and the CTC head of a fresh stack copy."""
    stack = stack.copy()
    cfg = stack.config
    return _train_ctc(
        tokens,
        stack,
        teacher_groups(cfg),
        cfg.frozen_blocks + 1,
        opt,
        kd=KdConfig(delta=1.0),
        teacher_logits={},
        augment=augment or AugmentConfig(),
        seed=seed,
        stage="teacher",
        stream=3,
    )


def build_teacher_cache(teacher: EncoderStack, tokens: Sequence[Token], cache: TeacherCache) -> int:
    train = _train_split(tokens)
    for tok in train:
        cache.save(tok.id, teacher.logits(tok.features))
    logger.info("cached teacher logits for %d tokens in %s", len(train), cache.root)
    return len(train)
