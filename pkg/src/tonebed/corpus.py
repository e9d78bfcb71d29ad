"""Synthetic tonal-word corpus: generation, perturbation, splitting and pair mining.

Feature channel layout for a corpus with ``feature_dim = D``:

    0        pitch, in octaves relative to a neutral reference
    1..D-2   segment channels (per-character prototypes over time)
    D-1      pitch velocity (slope of the tone contour, speaker independent)

A speaker adds ``base_pitch`` to the pitch channel and ``spectral_tilt`` times a
fixed ramp to the segment channels, so speaker identity and tone compete for
the same pitch channel. A speaker with ``modulation`` > 0 also adds a periodic
spectral modulation to the segment channels: a per-speaker pattern times a sine
of MODULATION_CYCLES periods over the token. It cancels under mean pooling and
stands out under max pooling.

Features are rounded to float32, the precision they are stored at, so offsets
and contours hold to float32 resolution rather than exactly.
"""

import dataclasses
import itertools
import logging
from collections import defaultdict
from collections.abc import Iterable, Mapping, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from functools import cached_property
from typing import Annotated, ClassVar, Final, Literal, Self

import numpy as np
from msgspec import Meta, Struct

from .numerics import Matrix
from .seeding import check_seed, substream

logger = logging.getLogger(__name__)

type Gender = Literal["F", "M"]
type Split = Literal["train", "test"]

ONSETS: Final[tuple[str, ...]] = ("l", "k", "m", "n", "p", "t", "h", "s", "ts", "ny", "x", "d")
RIMES: Final[tuple[str, ...]] = ("ia", "a", "o", "u", "ua", "ee", "i", "e", "ai", "oo", "au", "aw")

SEMITONES_PER_OCTAVE: Final[float] = 12.0
VELOCITY_SCALE: Final[float] = 0.5
SEGMENT_FLOOR: Final[float] = 0.25
MODULATION_CYCLES: Final[float] = 3.0


def opposite(gender: Gender) -> Gender:
    return "M" if gender == "F" else "F"


# -- Tone inventories --


class ToneInventory(Struct, frozen=True, forbid_unknown_fields=True):
    """Tone markers and pitch contours ``c0 + c1*u + c2*u**2`` over token time u in [0, 1]."""

    markers: tuple[str, ...]
    names: tuple[str, ...]
    contours: tuple[tuple[float, float, float], ...]

    def __post_init__(self) -> None:
        if not len(self.markers) == len(self.names) == len(self.contours):
            raise ValueError("ToneInventory fields must have equal length")
        if len(set(self.markers)) != len(self.markers):
            raise ValueError("Tone markers must be distinct")

    @property
    def size(self) -> int:
        return len(self.markers)

    def pitch(self, tone: int, u: np.ndarray) -> np.ndarray:
        c0, c1, c2 = self.contours[tone - 1]
        return c0 + c1 * u + c2 * u * u

    def velocity(self, tone: int, u: np.ndarray) -> np.ndarray:
        _, c1, c2 = self.contours[tone - 1]
        return VELOCITY_SCALE * (c1 + 2.0 * c2 * u)


SEVEN_TONES: Final[ToneInventory] = ToneInventory(
    markers=("b", "", "s", "j", "v", "g", "m"),
    names=(
        "high level",
        "mid level",
        "low level",
        "high falling",
        "mid rising",
        "breathy falling",
        "low falling creaky",
    ),
    contours=(
        (0.25, 0.0, 0.0),
        (0.0, 0.0, 0.0),
        (-0.2, -0.05, 0.0),
        (0.3, -0.5, 0.0),
        (-0.05, 0.35, 0.0),
        (0.1, -0.3, 0.0),
        (-0.15, 0.0, -0.25),
    ),
)

FOUR_TONES: Final[ToneInventory] = ToneInventory(
    markers=("1", "2", "3", "4"),
    names=("level", "rising", "dipping", "falling"),
    contours=(
        (0.25, 0.0, 0.0),
        (-0.05, 0.35, 0.0),
        (-0.05, -0.6, 0.6),
        (0.3, -0.6, 0.0),
    ),
)


def tone_inventory(n_tones: int) -> ToneInventory:
    match n_tones:
        case 7:
            return SEVEN_TONES
        case 4:
            return FOUR_TONES
        case n if n >= 2:
            levels = np.linspace(-0.25, 0.25, n)
            return ToneInventory(
                markers=tuple(str(k + 1) for k in range(n)),
                names=tuple(f"tone {k + 1}" for k in range(n)),
                contours=tuple(
                    (float(levels[k]), 0.3 if k % 2 else -0.3, 0.0) for k in range(n)
                ),
            )
        case _:
            raise ValueError(f"A tone inventory needs at least 2 tones, got {n_tones}")


# -- Corpus specification --


class SpeakerSpec(Struct, frozen=True, forbid_unknown_fields=True):
    speaker_id: str
    gender: Gender
    base_pitch: float
    spectral_tilt: float
    modulation: Annotated[float, Meta(ge=0.0)] = 0.0

    def __post_init__(self) -> None:
        stripped = self.speaker_id.strip()
        if not stripped or any(c in stripped for c in "/~\\"):
            raise ValueError(f"Invalid speaker id: {self.speaker_id!r}")
        if self.modulation < 0:
            raise ValueError(f"modulation must be non-negative, got {self.modulation}")


DEFAULT_SPEAKERS: Final[tuple[SpeakerSpec, ...]] = (
    SpeakerSpec("F1", "F", 0.135, 0.045, 1.0),
    SpeakerSpec("F2", "F", 0.150, 0.060, 1.0),
    SpeakerSpec("F3", "F", 0.165, 0.075, 1.0),
    SpeakerSpec("F4", "F", 0.180, 0.090, 1.0),
    SpeakerSpec("M1", "M", -0.135, -0.045, 1.0),
    SpeakerSpec("M2", "M", -0.150, -0.060, 1.0),
    SpeakerSpec("M3", "M", -0.165, -0.075, 1.0),
    SpeakerSpec("M4", "M", -0.180, -0.090, 1.0),
)

# msgspec bounds must fit in an int64; the u64 ceiling is checked in __post_init__.
Seed = Annotated[int, Meta(ge=0)]


class CorpusSpec(Struct, frozen=True, forbid_unknown_fields=True):
    n_base_words: Annotated[int, Meta(ge=2)] = 30
    n_tones: Annotated[int, Meta(ge=2)] = 7
    speakers: tuple[SpeakerSpec, ...] = DEFAULT_SPEAKERS
    frames_per_token: tuple[int, int] = (20, 32)
    feature_dim: Annotated[int, Meta(ge=3)] = 16
    noise_sigma: Annotated[float, Meta(ge=0.0)] = 0.02
    seed: Seed = 42

    def __post_init__(self) -> None:
        check_seed(self.seed)
        if self.n_base_words < 2:
            raise ValueError("n_base_words must be at least 2")
        if self.n_base_words > len(ONSETS) * len(RIMES):
            raise ValueError(f"n_base_words is limited to {len(ONSETS) * len(RIMES)}")
        if self.feature_dim < 3:
            raise ValueError("feature_dim must be at least 3")
        lo, hi = self.frames_per_token
        if lo < 1 or hi < lo:
            raise ValueError(f"Invalid frames_per_token range: {self.frames_per_token}")
        genders = {s.gender for s in self.speakers}
        if genders != {"F", "M"}:
            raise ValueError("CorpusSpec needs at least one speaker of each gender")
        ids = [s.speaker_id for s in self.speakers]
        if len(set(ids)) != len(ids):
            raise ValueError("Speaker ids must be unique")
        tone_inventory(self.n_tones)

    @property
    def tones(self) -> ToneInventory:
        return tone_inventory(self.n_tones)

    @property
    def base_words(self) -> tuple[str, ...]:
        grid = (o + r for o, r in itertools.product(ONSETS, RIMES))
        return tuple(itertools.islice(grid, self.n_base_words))

    def speaker(self, speaker_id: str) -> SpeakerSpec:
        for s in self.speakers:
            if s.speaker_id == speaker_id:
                return s
        raise ValueError(f"Unknown speaker: {speaker_id}")

    def word(self, base_word: str, tone: int) -> str:
        return base_word + self.tones.markers[tone - 1]


# -- Tokens --


class TokenRecord(Struct, frozen=True, forbid_unknown_fields=True):
    """One manifest line."""

    id: str
    word: str
    base_word: str
    tone: int
    speaker_id: str
    gender: Gender
    split: Split
    feature_path: str
    n_frames: int


@dataclass(frozen=True, slots=True, eq=False)
class Token:
    id: str
    word: str
    base_word: str
    tone: int
    speaker_id: str
    gender: Gender
    features: Matrix
    split: Split = "train"

    def __post_init__(self) -> None:
        features = np.asarray(self.features, dtype=np.float64)
        if features.ndim != 2 or features.shape[0] < 1:
            raise ValueError(f"Token {self.id} has empty features")
        if self.tone < 1:
            raise ValueError(f"Token {self.id} has invalid tone {self.tone}")
        if not self.word.startswith(self.base_word):
            raise ValueError(f"Token {self.id}: word {self.word!r} lacks base {self.base_word!r}")
        object.__setattr__(self, "features", features)

    @property
    def n_frames(self) -> int:
        return int(self.features.shape[0])

    def with_features(self, features: Matrix) -> Self:
        return dataclasses.replace(self, features=features)

    def with_split(self, split: Split) -> Self:
        return dataclasses.replace(self, split=split)

    def record(self, feature_path: str) -> TokenRecord:
        return TokenRecord(
            id=self.id,
            word=self.word,
            base_word=self.base_word,
            tone=self.tone,
            speaker_id=self.speaker_id,
            gender=self.gender,
            split=self.split,
            feature_path=feature_path,
            n_frames=self.n_frames,
        )


def _ramp(n: int) -> np.ndarray:
    return np.linspace(-1.0, 1.0, n) if n > 1 else np.zeros(n)


def _speaker_signal(spec: CorpusSpec, speaker: SpeakerSpec, n_frames: int) -> np.ndarray:
    """Everything a speaker adds to a token of ``n_frames`` frames."""
    dim = spec.feature_dim
    out = np.zeros((n_frames, dim))
    out[:, 0] = speaker.base_pitch
    out[:, 1 : dim - 1] = speaker.spectral_tilt * _ramp(dim - 2)
    if speaker.modulation > 0:
        slot = [s.speaker_id for s in spec.speakers].index(speaker.speaker_id)
        rng = substream(spec.seed, "corpus", 2, slot)
        phase = rng.uniform(0.0, 2.0 * np.pi)
        pattern = rng.uniform(-1.0, 1.0, size=dim - 2)
        u = (np.arange(n_frames) + 0.5) / n_frames
        wave = np.sin(2.0 * np.pi * MODULATION_CYCLES * u + phase)
        out[:, 1 : dim - 1] += speaker.modulation * np.outer(wave, pattern)
    return out


def _as_stored(features: np.ndarray) -> np.ndarray:
    """Round to the float32 grid, so in-memory tokens equal what a reload yields."""
    return features.astype("<f4").astype(np.float64)


def _repeats(label: str) -> int:
    return sum(1 for a, b in itertools.pairwise(label) if a == b)


class _Prototypes:
    """Per-character segment prototypes drawn from the corpus stream."""

    def __init__(self, seed: int, dim: int) -> None:
        self._seed = seed
        self._dim = dim
        self._cache: dict[str, np.ndarray] = {}

    def __call__(self, char: str) -> np.ndarray:
        if char not in self._cache:
            rng = substream(self._seed, "corpus", 0, ord(char))
            self._cache[char] = rng.uniform(-1.0, 1.0, size=self._dim)
        return self._cache[char]

    @cached_property
    def coda(self) -> np.ndarray:
        rng = substream(self._seed, "corpus", 0, 0)
        return 0.3 * rng.uniform(-1.0, 1.0, size=self._dim)

    def warm(self, chars: Iterable[str]) -> None:
        for c in sorted(set(chars)):
            self(c)
        _ = self.coda


def _segment_template(
    base_word: str, marker: str, n_frames: int, protos: _Prototypes, dim: int
) -> np.ndarray:
    spans = [protos(c) for c in base_word] + ([protos.coda] if marker else [])
    n_spans = len(spans)
    u = (np.arange(n_frames) + 0.5) / n_frames
    span_idx = np.minimum((u * n_spans).astype(int), n_spans - 1)
    within = u * n_spans - span_idx
    envelope = SEGMENT_FLOOR + (1.0 - SEGMENT_FLOOR) * np.sin(np.pi * within)
    out = np.empty((n_frames, dim))
    for t in range(n_frames):
        out[t] = spans[span_idx[t]] * envelope[t]
    return out


def _render(
    spec: CorpusSpec,
    protos: _Prototypes,
    index: int,
    base_word: str,
    tone: int,
    speaker: SpeakerSpec,
) -> Token:
    rng = substream(spec.seed, "corpus", 1, index)
    lo, hi = spec.frames_per_token
    n_frames = int(rng.integers(lo, hi + 1))
    dim = spec.feature_dim
    marker = spec.tones.markers[tone - 1]
    word = base_word + marker

    u = (np.arange(n_frames) + 0.5) / n_frames
    features = np.zeros((n_frames, dim))
    features[:, 0] = spec.tones.pitch(tone, u)
    features[:, 1 : dim - 1] = _segment_template(base_word, marker, n_frames, protos, dim - 2)
    features[:, dim - 1] = spec.tones.velocity(tone, u)
    features += _speaker_signal(spec, speaker, n_frames)
    if spec.noise_sigma > 0:
        features += rng.normal(0.0, spec.noise_sigma, size=features.shape)

    features = _as_stored(features)
    return Token(
        id=f"{speaker.speaker_id}-{word}",
        word=word,
        base_word=base_word,
        tone=tone,
        speaker_id=speaker.speaker_id,
        gender=speaker.gender,
        features=features,
    )


def generate(spec: CorpusSpec, *, workers: int = 1) -> list[Token]:
    """One token per (base word, tone, speaker), ordered by id."""
    tones = spec.tones
    words = spec.base_words
    lo = spec.frames_per_token[0]
    for base in words:
        for marker in tones.markers:
            label = base + marker
            if lo < len(label) + _repeats(label):
                raise ValueError(
                    f"frames_per_token minimum {lo} cannot align label {label!r} under CTC"
                )

    protos = _Prototypes(spec.seed, spec.feature_dim - 2)
    protos.warm("".join(words) + "".join(tones.markers))

    combos = [
        (i, base, tone, speaker)
        for i, (base, tone, speaker) in enumerate(
            itertools.product(words, range(1, tones.size + 1), spec.speakers)
        )
    ]
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        tokens = list(pool.map(lambda c: _render(spec, protos, *c), combos))

    tokens.sort(key=lambda t: t.id)
    logger.info("generated %d tokens (%d words x %d tones)", len(tokens), len(words), tones.size)
    return tokens


# -- Perturbations --


class AdditiveNoise(
    Struct, frozen=True, forbid_unknown_fields=True, tag="additive_noise", tag_field="kind"
):
    sigma: Annotated[float, Meta(ge=0.0)]
    seed: Seed = 0

    def __post_init__(self) -> None:
        check_seed(self.seed)


class TimeStretch(
    Struct, frozen=True, forbid_unknown_fields=True, tag="time_stretch", tag_field="kind"
):
    ratio: Annotated[float, Meta(ge=0.8, le=1.25)]

    def __post_init__(self) -> None:
        if not 0.8 <= self.ratio <= 1.25:
            raise ValueError(f"time_stretch ratio must lie in [0.8, 1.25], got {self.ratio}")


class Gain(Struct, frozen=True, forbid_unknown_fields=True, tag="gain", tag_field="kind"):
    db: float


class PitchShift(
    Struct, frozen=True, forbid_unknown_fields=True, tag="pitch_shift", tag_field="kind"
):
    semitones: float

    tone_unsafe: ClassVar[bool] = True


type Perturbation = AdditiveNoise | TimeStretch | Gain | PitchShift


class ToneUnsafePerturbationError(ValueError):
    def __init__(self, perturbation: Perturbation) -> None:
        super().__init__(f"tone-unsafe perturbation: {type(perturbation).__name__}")


def perturb(token: Token, p: Perturbation, tone_safe: bool = True) -> Token:
    x = token.features
    dim = x.shape[1]
    match p:
        case PitchShift(semitones=semitones):
            if tone_safe:
                raise ToneUnsafePerturbationError(p)
            out = x.copy()
            out[:, 0] += semitones / SEMITONES_PER_OCTAVE
        case AdditiveNoise(sigma=sigma, seed=seed):
            if sigma == 0:
                return token.with_features(x.copy())
            rng = np.random.default_rng(seed)
            out = x + rng.normal(0.0, sigma, size=x.shape)
        case TimeStretch(ratio=ratio):
            n_out = max(1, round(x.shape[0] / ratio))
            src = np.minimum(np.floor(np.arange(n_out) * ratio).astype(int), x.shape[0] - 1)
            out = x[src].copy()
        case Gain(db=db):
            out = x.copy()
            out[:, 1 : dim - 1] += db / 20.0
    return token.with_features(out)


def speaker_transplant(token: Token, spec: CorpusSpec, target_id: str) -> Token:
    """Swap the speaker signal of a training token for another training speaker's."""
    if token.split != "train":
        raise ValueError(f"speaker transplant is restricted to the training split: {token.id}")
    source = spec.speaker(token.speaker_id)
    target = spec.speaker(target_id)
    if source.speaker_id == target.speaker_id:
        raise ValueError(f"transplant target equals source speaker {source.speaker_id}")
    n = token.n_frames
    delta = _speaker_signal(spec, target, n) - _speaker_signal(spec, source, n)
    return Token(
        id=f"{token.id}~{target.speaker_id}",
        word=token.word,
        base_word=token.base_word,
        tone=token.tone,
        speaker_id=target.speaker_id,
        gender=target.gender,
        features=_as_stored(token.features + delta),
        split="train",
    )


def transplant_views(
    tokens: Sequence[Token], spec: CorpusSpec, speaker_pool: Sequence[str]
) -> list[Token]:
    """Convert every training token of the pool to every other pool speaker."""
    pool = tuple(dict.fromkeys(speaker_pool))
    if len(pool) < 2:
        return []
    held_out = {
        sid
        for sid, splits in _splits_by_speaker(tokens).items()
        if splits == {"test"}
    }
    if blocked := held_out.intersection(pool):
        raise ValueError(f"speaker pool contains test-only speakers: {sorted(blocked)}")
    views = [
        speaker_transplant(tok, spec, target)
        for tok in tokens
        if tok.split == "train" and tok.speaker_id in pool
        for target in pool
        if target != tok.speaker_id
    ]
    views.sort(key=lambda t: t.id)
    return views


def _splits_by_speaker(tokens: Iterable[Token]) -> dict[str, set[str]]:
    out: dict[str, set[str]] = defaultdict(set)
    for tok in tokens:
        out[tok.speaker_id].add(tok.split)
    return out


class AugmentConfig(Struct, frozen=True, forbid_unknown_fields=True):
    """Tone-safe training augmentation; pitch shifting is never drawn."""

    probability: Annotated[float, Meta(ge=0.0, le=1.0)] = 0.5
    noise_sigma: Annotated[float, Meta(ge=0.0)] = 0.02
    stretch: tuple[float, float] = (0.9, 1.1)
    gain_db: tuple[float, float] = (-3.0, 3.0)
    transplant_pool: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        lo, hi = self.stretch
        if not 0.8 <= lo <= hi <= 1.25:
            raise ValueError(f"stretch range must lie within [0.8, 1.25], got {self.stretch}")
        if self.gain_db[0] > self.gain_db[1]:
            raise ValueError(f"Invalid gain range: {self.gain_db}")

    def draw(self, token: Token, rng: np.random.Generator, *, allow_stretch: bool = True) -> Token:
        if rng.random() >= self.probability:
            return token
        out = perturb(token, Gain(float(rng.uniform(*self.gain_db))))
        if allow_stretch:
            out = perturb(out, TimeStretch(float(rng.uniform(*self.stretch))))
        seed = int(rng.integers(0, 2**63 - 1))
        return perturb(out, AdditiveNoise(self.noise_sigma, seed))


# -- Splits --


class CoverageSplit(
    Struct, frozen=True, forbid_unknown_fields=True, tag="coverage", tag_field="policy"
):
    """Hold out one token per word and gender, and at least one token per base word."""

    seed: Seed = 0

    def __post_init__(self) -> None:
        check_seed(self.seed)


class HeldOutSpeakerSplit(
    Struct, frozen=True, forbid_unknown_fields=True, tag="held_out_speaker", tag_field="policy"
):
    speaker_id: str


type SplitPolicy = CoverageSplit | HeldOutSpeakerSplit


def split(corpus: Sequence[Token], policy: SplitPolicy) -> list[Token]:
    match policy:
        case HeldOutSpeakerSplit(speaker_id=speaker_id):
            if not any(t.speaker_id == speaker_id for t in corpus):
                raise ValueError(f"held-out speaker absent from corpus: {speaker_id}")
            return [t.with_split("test" if t.speaker_id == speaker_id else "train") for t in corpus]
        case CoverageSplit(seed=seed):
            return _coverage_split(corpus, substream(seed, "split"))


def _coverage_split(corpus: Sequence[Token], rng: np.random.Generator) -> list[Token]:
    by_word: dict[str, list[Token]] = defaultdict(list)
    by_base: dict[str, list[Token]] = defaultdict(list)
    for tok in sorted(corpus, key=lambda t: t.id):
        by_word[tok.word].append(tok)
        by_base[tok.base_word].append(tok)

    test_ids: set[str] = set()
    for word in sorted(by_word):
        for gender in ("F", "M"):
            candidates = [t.id for t in by_word[word] if t.gender == gender]
            if len(candidates) >= 2:
                test_ids.add(candidates[int(rng.integers(len(candidates)))])

    for base in sorted(by_base):
        ids = [t.id for t in by_base[base]]
        if not test_ids.intersection(ids):
            test_ids.add(ids[int(rng.integers(len(ids)))])

    return [t.with_split("test" if t.id in test_ids else "train") for t in corpus]


# -- Pair mining --


class PairSet(Struct, frozen=True, forbid_unknown_fields=True):
    anchor: str
    cross_gender_positive: str | None
    contrastive_negatives: tuple[str, ...] = ()
    tone_positives: tuple[str, ...] = ()
    hard_negatives: tuple[str, ...] = ()
    soft_negatives: tuple[str, ...] = ()

    def members(self) -> tuple[str, ...]:
        """Every token id the pair set references, anchor first, without duplicates."""
        ordered = (
            self.anchor,
            *((self.cross_gender_positive,) if self.cross_gender_positive else ()),
            *self.contrastive_negatives,
            *self.tone_positives,
            *self.hard_negatives,
            *self.soft_negatives,
        )
        return tuple(dict.fromkeys(ordered))


class UnusableAnchorError(ValueError):
    def __init__(self, anchor_id: str) -> None:
        super().__init__(f"anchor unusable for speaker loss: {anchor_id}")
        self.anchor_id = anchor_id


class PairIndex:
    """Label lookups over a fixed token pool, built once per training run."""

    __slots__ = ("_base", "_by_base", "_by_word", "_gender", "_pos", "_word", "ids", "tokens")

    def __init__(self, tokens: Sequence[Token]) -> None:
        ordered = sorted(tokens, key=lambda t: t.id)
        self.tokens: Final[Mapping[str, Token]] = {t.id: t for t in ordered}
        if len(self.tokens) != len(ordered):
            raise ValueError("duplicate token ids in mining pool")
        self.ids: Final[np.ndarray] = np.array([t.id for t in ordered], dtype=object)
        words = sorted({t.word for t in ordered})
        bases = sorted({t.base_word for t in ordered})
        word_code = {w: i for i, w in enumerate(words)}
        base_code = {b: i for i, b in enumerate(bases)}
        self._word: Final[np.ndarray] = np.array([word_code[t.word] for t in ordered])
        self._base: Final[np.ndarray] = np.array([base_code[t.base_word] for t in ordered])
        self._gender: Final[np.ndarray] = np.array([t.gender == "F" for t in ordered])
        self._pos: Final[dict[str, int]] = {t.id: i for i, t in enumerate(ordered)}
        self._by_word: Final[dict[int, np.ndarray]] = {
            c: np.flatnonzero(self._word == c) for c in range(len(words))
        }
        self._by_base: Final[dict[int, np.ndarray]] = {
            c: np.flatnonzero(self._base == c) for c in range(len(bases))
        }

    def __contains__(self, token_id: str) -> bool:
        return token_id in self._pos

    def _ids(self, positions: np.ndarray) -> tuple[str, ...]:
        return tuple(str(x) for x in self.ids[positions])

    def tone_sets(
        self,
        anchor_id: str,
        rng: np.random.Generator,
        *,
        max_positives: int,
        n_soft: int,
    ) -> tuple[tuple[str, ...], tuple[str, ...], tuple[str, ...]]:
        i = self._pos[anchor_id]
        same_word = self._by_word[int(self._word[i])]
        positives = same_word[same_word != i]
        if len(positives) > max_positives:
            positives = rng.choice(positives, size=max_positives, replace=False)
        same_base = self._by_base[int(self._base[i])]
        hard = same_base[self._word[same_base] != self._word[i]]
        soft = np.flatnonzero(self._base != self._base[i])
        if len(soft) > n_soft:
            soft = rng.choice(soft, size=n_soft, replace=False)
        return self._ids(positives), self._ids(hard), self._ids(soft)

    def cross_gender(
        self, anchor_id: str, rng: np.random.Generator, n: int
    ) -> tuple[str, tuple[str, ...]]:
        i = self._pos[anchor_id]
        same_word = self._by_word[int(self._word[i])]
        candidates = same_word[self._gender[same_word] != self._gender[i]]
        if len(candidates) == 0:
            raise UnusableAnchorError(anchor_id)
        positive = candidates[int(rng.integers(len(candidates)))]
        pool = np.flatnonzero(self._word != self._word[i])
        if len(pool) == 0:
            raise UnusableAnchorError(anchor_id)
        negatives = rng.choice(pool, size=n, replace=len(pool) < n)
        return str(self.ids[positive]), self._ids(negatives)


def mine_pairs(
    corpus: Sequence[Token] | PairIndex,
    anchor_id: str,
    N: int,
    rng_seed: int | Sequence[int],
    *,
    max_positives: int = 4,
    n_soft: int | None = None,
) -> PairSet:
    if N < 1:
        raise ValueError(f"N must be at least 1, got {N}")
    index = corpus if isinstance(corpus, PairIndex) else PairIndex(corpus)
    if anchor_id not in index:
        raise ValueError(f"Unknown anchor: {anchor_id}")
    rng = np.random.default_rng(rng_seed)
    positive, negatives = index.cross_gender(anchor_id, rng, N)
    tone_pos, hard, soft = index.tone_sets(
        anchor_id, rng, max_positives=max_positives, n_soft=N if n_soft is None else n_soft
    )
    return PairSet(
        anchor=anchor_id,
        cross_gender_positive=positive,
        contrastive_negatives=negatives,
        tone_positives=tone_pos,
        hard_negatives=hard,
        soft_negatives=soft,
    )


def mine_tone_sets(
    corpus: Sequence[Token] | PairIndex,
    anchor_id: str,
    rng_seed: int | Sequence[int],
    *,
    max_positives: int = 4,
    n_soft: int = 20,
) -> PairSet:
    """P/H/S only, for anchors that have no cross-gender positive."""
    index = corpus if isinstance(corpus, PairIndex) else PairIndex(corpus)
    if anchor_id not in index:
        raise ValueError(f"Unknown anchor: {anchor_id}")
    rng = np.random.default_rng(rng_seed)
    tone_pos, hard, soft = index.tone_sets(
        anchor_id, rng, max_positives=max_positives, n_soft=n_soft
    )
    return PairSet(
        anchor=anchor_id,
        cross_gender_positive=None,
        tone_positives=tone_pos,
        hard_negatives=hard,
        soft_negatives=soft,
    )


def count_by(tokens: Iterable[Token], key: str) -> dict[str, int]:
    counts: dict[str, int] = defaultdict(int)
    for tok in tokens:
        counts[str(getattr(tok, key))] += 1
    return dict(sorted(counts.items()))


__all__ = [
    "DEFAULT_SPEAKERS",
    "FOUR_TONES",
    "SEVEN_TONES",
    "AdditiveNoise",
    "AugmentConfig",
    "CorpusSpec",
    "CoverageSplit",
    "Gain",
    "HeldOutSpeakerSplit",
    "PairIndex",
    "PairSet",
    "Perturbation",
    "PitchShift",
    "SpeakerSpec",
    "SplitPolicy",
    "TimeStretch",
    "Token",
    "TokenRecord",
    "ToneInventory",
    "ToneUnsafePerturbationError",
    "UnusableAnchorError",
    "count_by",
    "generate",
    "mine_pairs",
    "mine_tone_sets",
    "opposite",
    "perturb",
    "speaker_transplant",
    "split",
    "tone_inventory",
    "transplant_views",
]
