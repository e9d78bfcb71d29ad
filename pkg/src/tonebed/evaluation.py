"""Evaluation battery: retrieval, tone geometry, edit rates, similarity probes, projection.

Pooling is fixed per analysis: max pooling for retrieval, mean pooling for tone
geometry and similarity scoring.
"""

import logging
from collections import defaultdict
from collections.abc import Iterable, Sequence
from typing import Final, Literal, Self

import numpy as np
from msgspec import Struct
from numpy.typing import ArrayLike

from .corpus import PitchShift, Token, opposite, perturb
from .ctc import DEFAULT_BEAM_WIDTH, LexiconTrie, beam_search_decode, greedy_decode
from .encoder import EncoderStack, FrameBatch
from .numerics import MAX, MEAN, Matrix, PoolingMode, log_softmax, normalize_rows, pool
from .seeding import substream

logger = logging.getLogger(__name__)

RETRIEVAL_POOLING: Final[PoolingMode] = MAX
ANALYSIS_POOLING: Final[PoolingMode] = MEAN
PITCH_SHIFTS: Final[tuple[float, ...]] = (-2.0, -1.0, -0.5, 0.5, 1.0, 2.0)
MAX_WRONG_WORD_PAIRS: Final[int] = 2000


class EmptyReferenceError(ValueError):
    def __init__(self) -> None:
        super().__init__("empty reference set")


# -- Embedding helpers --


def embed_tokens(
    stack: EncoderStack, tokens: Sequence[Token], layer: int, mode: PoolingMode
) -> Matrix:
    """Row i is the normalized embedding of tokens[i] at ``layer``."""
    return embed_all_layers(stack, tokens, mode, layers=(layer,))[layer]


def embed_all_layers(
    stack: EncoderStack,
    tokens: Sequence[Token],
    mode: PoolingMode,
    layers: Iterable[int] | None = None,
) -> dict[int, Matrix]:
    wanted = sorted(set(layers)) if layers is not None else list(range(1, stack.config.M + 1))
    batch = FrameBatch.of([t.features for t in tokens])
    cache = stack.run(batch.frames, max(wanted))
    out = {}
    for layer in wanted:
        h = cache.state(layer)
        pooled = np.stack([pool(batch.segment(i, h), mode).values for i in range(len(batch))])
        out[layer] = normalize_rows(pooled)
    return out


def similarity_matrix(A: ArrayLike, B: ArrayLike) -> Matrix:
    """Clipped cosine similarities; bit-identical rows score exactly 1."""
    a = normalize_rows(A)
    b = normalize_rows(B)
    sims = np.clip(a @ b.T, -1.0, 1.0)
    rows_b: dict[bytes, list[int]] = defaultdict(list)
    for j, row in enumerate(b):
        rows_b[row.tobytes()].append(j)
    for i, row in enumerate(a):
        for j in rows_b.get(row.tobytes(), ()):
            sims[i, j] = 1.0
    return sims


# -- Retrieval --


class RetrievalResult(Struct, frozen=True):
    direction: str
    top1: float
    top5: float
    ranks: tuple[int | None, ...]

    def __post_init__(self) -> None:
        if self.top1 > self.top5:
            raise ValueError("top1 cannot exceed top5")

    def top_k(self, k: int) -> float:
        if not self.ranks:
            return 0.0
        return sum(1 for r in self.ranks if r is not None and r <= k) / len(self.ranks)


def retrieval_topk(
    queries: ArrayLike,
    query_words: Sequence[str],
    gallery: ArrayLike,
    gallery_words: Sequence[str],
    direction: str = "",
) -> RetrievalResult:
    """Rank of the first same-word gallery item per query, by descending cosine similarity."""
    q = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    g = np.atleast_2d(np.asarray(gallery, dtype=np.float64))
    if g.shape[0] == 0 or len(gallery_words) == 0:
        raise ValueError("empty gallery")
    if q.shape[0] != len(query_words) or g.shape[0] != len(gallery_words):
        raise ValueError("labels do not match embeddings")
    sims = similarity_matrix(q, g)
    words = np.asarray(gallery_words, dtype=object)
    ranks: list[int | None] = []
    for i, word in enumerate(query_words):
        order = np.argsort(-sims[i], kind="stable")
        hits = np.flatnonzero(words[order] == word)
        ranks.append(int(hits[0]) + 1 if hits.size else None)

    n = len(ranks)
    top1 = sum(1 for r in ranks if r is not None and r <= 1) / n if n else 0.0
    top5 = sum(1 for r in ranks if r is not None and r <= 5) / n if n else 0.0
    return RetrievalResult(direction, top1, top5, tuple(ranks))


class CrossGenderRetrieval(Struct, frozen=True):
    f_to_m: RetrievalResult
    m_to_f: RetrievalResult

    @property
    def avg_top1(self) -> float:
        return (self.f_to_m.top1 + self.m_to_f.top1) / 2.0

    @property
    def avg_top5(self) -> float:
        return (self.f_to_m.top5 + self.m_to_f.top5) / 2.0


def cross_gender_retrieval(tokens: Sequence[Token], Z: ArrayLike) -> CrossGenderRetrieval:
    Z = np.asarray(Z, dtype=np.float64)
    f = [i for i, t in enumerate(tokens) if t.gender == "F"]
    m = [i for i, t in enumerate(tokens) if t.gender == "M"]
    words = [t.word for t in tokens]
    return CrossGenderRetrieval(
        f_to_m=retrieval_topk(Z[f], [words[i] for i in f], Z[m], [words[i] for i in m], "F→M"),
        m_to_f=retrieval_topk(Z[m], [words[i] for i in m], Z[f], [words[i] for i in f], "M→F"),
    )


def unseen_speaker_retrieval(
    tokens: Sequence[Token], Z: ArrayLike, speaker_id: str
) -> RetrievalResult:
    """Held-out speaker's tokens against the opposite-gender training speakers."""
    Z = np.asarray(Z, dtype=np.float64)
    queries = [i for i, t in enumerate(tokens) if t.speaker_id == speaker_id]
    if not queries:
        raise ValueError(f"no tokens for speaker {speaker_id}")
    gender = opposite(tokens[queries[0]].gender)
    gallery = [
        i for i, t in enumerate(tokens) if t.split == "train" and t.gender == gender
    ]
    return retrieval_topk(
        Z[queries],
        [tokens[i].word for i in queries],
        Z[gallery],
        [tokens[i].word for i in gallery],
        f"{speaker_id}→{gender}",
    )


# -- Tone geometry --


class Stat(Struct, frozen=True):
    mean: float
    std: float
    n: int

    @classmethod
    def of(cls, values: np.ndarray) -> Self | None:
        if values.size == 0:
            return None
        return cls(float(values.mean()), float(values.std()), int(values.size))


class ToneGeometry(Struct, frozen=True):
    pos_sim: Stat | None
    hard_neg_dist: Stat | None
    soft_neg_dist: Stat | None
    per_tone: dict[int, "ToneGeometry"] | None = None


def _label_arrays(tokens: Sequence[Token]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    words = np.array([t.word for t in tokens], dtype=object)
    bases = np.array([t.base_word for t in tokens], dtype=object)
    tones = np.array([t.tone for t in tokens])
    return words, bases, tones


def tone_geometry(tokens: Sequence[Token], Z: ArrayLike, *, per_tone: bool = True) -> ToneGeometry:
    """Pair statistics over unordered pairs; the per-tone table conditions on the anchor."""
    sims = similarity_matrix(Z, Z)
    words, bases, tones = _label_arrays(tokens)
    same_word = words[:, None] == words[None, :]
    same_base = bases[:, None] == bases[None, :]
    n = len(tokens)
    upper = np.triu(np.ones((n, n), dtype=bool), k=1)

    overall = ToneGeometry(
        pos_sim=Stat.of(sims[upper & same_word]),
        hard_neg_dist=Stat.of(1.0 - sims[upper & same_base & ~same_word]),
        soft_neg_dist=Stat.of(1.0 - sims[upper & ~same_base]),
    )
    if not per_tone:
        return overall

    off_diag = ~np.eye(n, dtype=bool)
    table: dict[int, ToneGeometry] = {}
    for tone in sorted(set(tones.tolist())):
        anchor = (tones == tone)[:, None] & off_diag
        table[int(tone)] = ToneGeometry(
            pos_sim=Stat.of(sims[anchor & same_word]),
            hard_neg_dist=Stat.of(1.0 - sims[anchor & same_base & ~same_word]),
            soft_neg_dist=Stat.of(1.0 - sims[anchor & ~same_base]),
        )
    return ToneGeometry(overall.pos_sim, overall.hard_neg_dist, overall.soft_neg_dist, table)


# -- Edit rates --


class EditCounts(Struct, frozen=True):
    substitutions: int = 0
    deletions: int = 0
    insertions: int = 0

    @property
    def total(self) -> int:
        return self.substitutions + self.deletions + self.insertions

    def __add__(self, other: Self) -> Self:
        return type(self)(
            self.substitutions + other.substitutions,
            self.deletions + other.deletions,
            self.insertions + other.insertions,
        )


def edit_distance(hypothesis: Sequence[str], reference: Sequence[str]) -> EditCounts:
    """Unit-cost Levenshtein alignment of hypothesis against reference."""
    n, m = len(reference), len(hypothesis)
    dp = np.zeros((n + 1, m + 1), dtype=np.int64)
    dp[:, 0] = np.arange(n + 1)
    dp[0, :] = np.arange(m + 1)
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            cost = 0 if reference[i - 1] == hypothesis[j - 1] else 1
            dp[i, j] = min(dp[i - 1, j - 1] + cost, dp[i - 1, j] + 1, dp[i, j - 1] + 1)

    s = d = ins = 0
    i, j = n, m
    while i > 0 or j > 0:
        if i > 0 and j > 0:
            cost = 0 if reference[i - 1] == hypothesis[j - 1] else 1
            if dp[i, j] == dp[i - 1, j - 1] + cost:
                s += cost
                i, j = i - 1, j - 1
                continue
        if i > 0 and dp[i, j] == dp[i - 1, j] + 1:
            d += 1
            i -= 1
        else:
            ins += 1
            j -= 1
    return EditCounts(s, d, ins)


class AsrScore(Struct, frozen=True):
    cer: float
    wer: float
    word_edits: EditCounts
    char_edits: EditCounts
    n_words: int
    n_chars: int


def edit_rates(hypotheses: Sequence[str], references: Sequence[str]) -> AsrScore:
    if len(hypotheses) != len(references):
        raise ValueError("hypotheses and references differ in count")
    words = EditCounts()
    chars = EditCounts()
    n_words = n_chars = 0
    for hyp, ref in zip(hypotheses, references, strict=True):
        hyp_words, ref_words = hyp.split(), ref.split()
        words = words + edit_distance(hyp_words, ref_words)
        ref_text = " ".join(ref_words)
        chars = chars + edit_distance(list(" ".join(hyp_words)), list(ref_text))
        n_words += len(ref_words)
        n_chars += len(ref_text)
    if n_words == 0:
        raise EmptyReferenceError
    return AsrScore(
        cer=chars.total / n_chars,
        wer=words.total / n_words,
        word_edits=words,
        char_edits=chars,
        n_words=n_words,
        n_chars=n_chars,
    )


def transcribe(
    stack: EncoderStack,
    tokens: Sequence[Token],
    *,
    decoder: Literal["beam", "greedy"] = "beam",
    lexicon: Iterable[str] = (),
    beam_width: int = DEFAULT_BEAM_WIDTH,
) -> list[str]:
    trie = LexiconTrie.from_words(lexicon, stack.vocabulary) if decoder == "beam" else None
    out = []
    for tok in tokens:
        logp = log_softmax(stack.logits(tok.features))
        if decoder == "greedy":
            hyp = greedy_decode(logp)
        else:
            hyp = beam_search_decode(logp, beam_width, trie if trie and trie.entries else None)
        out.append(stack.vocabulary.decode(hyp.labels))
    return out


# -- Similarity experiments --


class SimilarityScores(Struct, frozen=True):
    e1: float | None
    e2: float | None
    e3: float | None
    e4: float | None
    e2_by_shift: dict[float, float] | None = None


def _mean_or_none(values: list[float] | np.ndarray) -> float | None:
    arr = np.asarray(values, dtype=np.float64)
    return float(arr.mean()) if arr.size else None


def pair_similarity_scores(
    tokens: Sequence[Token], Z: ArrayLike, *, seed: int = 0, max_pairs: int = MAX_WRONG_WORD_PAIRS
) -> SimilarityScores:
    """Cross-speaker same-word, permuted wrong-word and tone-confusion similarities."""
    sims = similarity_matrix(Z, Z)
    words, bases, _ = _label_arrays(tokens)
    speakers = np.array([t.speaker_id for t in tokens], dtype=object)
    n = len(tokens)
    upper = np.triu(np.ones((n, n), dtype=bool), k=1)
    same_word = words[:, None] == words[None, :]
    same_base = bases[:, None] == bases[None, :]
    cross_speaker = speakers[:, None] != speakers[None, :]

    perm = substream(seed, "eval").permutation(n)
    wrong = [float(sims[i, j]) for i, j in enumerate(perm) if bases[i] != bases[j]][:max_pairs]
    return SimilarityScores(
        e1=_mean_or_none(sims[upper & same_word & cross_speaker]),
        e2=None,
        e3=_mean_or_none(wrong),
        e4=_mean_or_none(sims[upper & same_base & ~same_word]),
    )


def similarity_experiments(
    tokens: Sequence[Token],
    stack: EncoderStack,
    layer: int | None = None,
    *,
    shifts: Sequence[float] = PITCH_SHIFTS,
    seed: int = 0,
) -> SimilarityScores:
    layer = stack.config.feature_layer if layer is None else layer
    Z = embed_tokens(stack, tokens, layer, ANALYSIS_POOLING)
    base = pair_similarity_scores(tokens, Z, seed=seed)
    if not shifts:
        return base

    by_shift: dict[float, float] = {}
    for semitones in shifts:
        shifted = [perturb(t, PitchShift(semitones), tone_safe=False) for t in tokens]
        Zs = embed_tokens(stack, shifted, layer, ANALYSIS_POOLING)
        by_shift[float(semitones)] = float(np.mean(np.diag(similarity_matrix(Z, Zs))))
    e2 = float(np.mean(list(by_shift.values())))
    return SimilarityScores(base.e1, e2, base.e3, base.e4, by_shift)


# -- Layer probe and tone classification --


class ProbeRow(Struct, frozen=True):
    layer: int
    avg_top1: float | None
    hard_neg_dist: float | None


def probe_layers(
    tokens: Sequence[Token], retrieval_Z: dict[int, Matrix], analysis_Z: dict[int, Matrix]
) -> list[ProbeRow]:
    both_genders = {t.gender for t in tokens} == {"F", "M"}
    rows = []
    for layer in sorted(retrieval_Z):
        avg_top1 = (
            cross_gender_retrieval(tokens, retrieval_Z[layer]).avg_top1 if both_genders else None
        )
        geometry = tone_geometry(tokens, analysis_Z[layer], per_tone=False)
        hard = geometry.hard_neg_dist.mean if geometry.hard_neg_dist else None
        rows.append(ProbeRow(layer, avg_top1, hard))
    return rows


def layer_probe(tokens: Sequence[Token], stack: EncoderStack) -> list[ProbeRow]:
    return probe_layers(
        tokens,
        embed_all_layers(stack, tokens, RETRIEVAL_POOLING),
        embed_all_layers(stack, tokens, ANALYSIS_POOLING),
    )


class ToneAccuracy(Struct, frozen=True):
    top1: float
    top3: float
    per_tone: dict[int, float]
    n: int


def tone_ranking(logits: ArrayLike) -> np.ndarray:
    """Tone indices (1-based) by descending logit, ties to the lower tone."""
    x = np.asarray(logits, dtype=np.float64)
    return np.lexsort((np.arange(x.shape[0]), -x)) + 1


def tone_accuracy(logits: ArrayLike, tones: Sequence[int]) -> ToneAccuracy:
    L = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    hits1: dict[int, list[bool]] = defaultdict(list)
    top1 = top3 = 0
    for row, tone in zip(L, tones, strict=True):
        ranking = tone_ranking(row)
        hit = bool(ranking[0] == tone)
        top1 += hit
        top3 += bool(tone in ranking[:3])
        hits1[int(tone)].append(hit)
    n = len(tones)
    if n == 0:
        return ToneAccuracy(0.0, 0.0, {}, 0)
    per_tone = {t: float(np.mean(h)) for t, h in sorted(hits1.items())}
    return ToneAccuracy(top1 / n, top3 / n, per_tone, n)


def tone_cls_accuracy(
    tokens: Sequence[Token], stack: EncoderStack, *, pooling: PoolingMode = ANALYSIS_POOLING
) -> ToneAccuracy:
    """Tone head accuracy on embeddings pooled the way the head was trained."""
    Z = embed_tokens(stack, tokens, stack.config.feature_layer, pooling)
    head = stack.tone_head
    logits = Z @ head.W.T + head.b
    return tone_accuracy(logits, [t.tone for t in tokens])


# -- Projection --


class Projection(Struct, frozen=True):
    coords: tuple[tuple[float, float], ...]
    explained_variance: tuple[float, float]
    rank_deficient: bool


def _power_iteration(C: Matrix, rng: np.random.Generator, iters: int, tol: float) -> np.ndarray:
    v = rng.normal(size=C.shape[0])
    v /= np.linalg.norm(v)
    for _ in range(iters):
        w = C @ v
        norm = np.linalg.norm(w)
        if norm == 0.0:
            return v
        w /= norm
        if np.linalg.norm(w - v) < tol:
            return w
        v = w
    return v


def _fix_sign(v: np.ndarray) -> np.ndarray:
    return v if v[np.argmax(np.abs(v))] >= 0 else -v


def project_2d(
    embeddings: ArrayLike, *, seed: int = 0, iters: int = 10_000, tol: float = 1e-13
) -> Projection:
    """Top two principal components by power iteration with deflation."""
    X = np.asarray(embeddings, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 3:
        raise ValueError("project_2d needs at least 3 embeddings")
    Xc = X - X.mean(axis=0)
    C = Xc.T @ Xc / X.shape[0]
    rng = substream(seed, "eval", 1)

    v1 = _fix_sign(_power_iteration(C, rng, iters, tol))
    lam1 = float(v1 @ C @ v1)
    deflated = C - lam1 * np.outer(v1, v1)
    v2 = _power_iteration(deflated, rng, iters, tol)
    v2 = v2 - (v2 @ v1) * v1
    lam2 = float(v2 @ C @ v2) / float(v2 @ v2) if np.linalg.norm(v2) > 0 else 0.0

    scale = max(lam1, 1.0)
    rank_deficient = lam2 <= 1e-12 * scale or C.shape[0] < 2
    if rank_deficient:
        logger.warning("projection is rank deficient; second axis zeroed")
        v2 = np.zeros_like(v1)
        lam2 = 0.0
    else:
        v2 = _fix_sign(v2 / np.linalg.norm(v2))

    coords = np.column_stack((Xc @ v1, Xc @ v2))
    return Projection(
        coords=tuple((float(x), float(y)) for x, y in coords),
        explained_variance=(lam1, lam2),
        rank_deficient=rank_deficient,
    )
