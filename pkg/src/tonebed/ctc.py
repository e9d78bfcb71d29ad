"""CTC in the log domain: likelihood, gradient, greedy and prefix beam decoding."""

from collections import defaultdict
from collections.abc import Iterable, Sequence
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Final, Self

import numpy as np
from msgspec import Struct
from numpy.typing import ArrayLike
from scipy import special

from .corpus import Token
from .numerics import Matrix
from .store import write_atomic

BLANK: Final[int] = 0
ROW_TOLERANCE: Final[float] = 1e-6
DEFAULT_BEAM_WIDTH: Final[int] = 16

type Labels = tuple[int, ...]


class InfeasibleTargetError(ValueError):
    def __init__(self, target: Sequence[int], n_frames: int) -> None:
        super().__init__(f"target of length {len(target)} cannot be aligned to {n_frames} frames")


class Vocabulary(Struct, frozen=True, forbid_unknown_fields=True, dict=True):
    """Lexical symbols; label ``k`` is ``symbols[k - 1]`` and 0 is the blank."""

    symbols: tuple[str, ...]

    def __post_init__(self) -> None:
        if len(set(self.symbols)) != len(self.symbols):
            raise ValueError("vocabulary symbols must be distinct")
        if any(len(s) != 1 for s in self.symbols):
            raise ValueError("vocabulary symbols must be single characters")

    @property
    def size(self) -> int:
        """Output width including the blank."""
        return len(self.symbols) + 1

    @cached_property
    def _index(self) -> dict[str, int]:
        return {s: i + 1 for i, s in enumerate(self.symbols)}

    def encode(self, text: str) -> Labels:
        try:
            return tuple(self._index[c] for c in text)
        except KeyError as e:
            raise ValueError(f"symbol {e.args[0]!r} not in vocabulary") from e

    def decode(self, labels: Iterable[int]) -> str:
        return "".join(self.symbols[k - 1] for k in labels if k != BLANK)


def vocabulary_for(tokens: Iterable[Token]) -> Vocabulary:
    return Vocabulary(tuple(sorted({c for t in tokens for c in t.word})))


def lexicon_for(tokens: Iterable[Token]) -> tuple[str, ...]:
    return tuple(sorted({t.word for t in tokens}))


def load_lexicon(path: Path) -> tuple[str, ...]:
    lines = path.read_text(encoding="utf-8").splitlines()
    return tuple(line.strip() for line in lines if line.strip())


def save_lexicon(path: Path, entries: Iterable[str]) -> None:
    body = "".join(f"{e}\n" for e in entries)
    write_atomic(path, body.encode("utf-8"))


def collapse(path: Iterable[int]) -> Labels:
    out: list[int] = []
    prev: int | None = None
    for k in path:
        if k != prev and k != BLANK:
            out.append(int(k))
        prev = k
    return tuple(out)


# -- Forward-backward --


def _check_posteriors(log_posteriors: ArrayLike) -> Matrix:
    logp = np.asarray(log_posteriors, dtype=np.float64)
    if logp.ndim != 2 or logp.shape[0] < 1 or logp.shape[1] < 2:
        raise ValueError(f"log posteriors must be T x (|V|+1), got shape {logp.shape}")
    row_mass = special.logsumexp(logp, axis=1)
    if np.any(np.abs(row_mass) > ROW_TOLERANCE):
        raise ValueError("malformed log posteriors: rows are not log-distributions")
    return logp


def _expand(target: Sequence[int], n_symbols: int) -> tuple[np.ndarray, np.ndarray]:
    if any(k <= BLANK or k >= n_symbols for k in target):
        raise ValueError(f"target labels must lie in 1..{n_symbols - 1}")
    ext = np.full(2 * len(target) + 1, BLANK, dtype=np.int64)
    ext[1::2] = target
    skip = np.zeros(ext.shape[0], dtype=bool)
    skip[3::2] = ext[3::2] != ext[1:-2:2]
    return ext, skip


def _shift(x: np.ndarray, k: int) -> np.ndarray:
    out = np.full_like(x, -np.inf)
    if k > 0:
        out[k:] = x[:-k]
    else:
        out[:k] = x[-k:]
    return out


@dataclass(frozen=True, slots=True, eq=False)
class CtcLattice:
    """Trellis over the blank-interleaved target; both passes include the frame's emission."""

    log_alpha: Matrix
    log_beta: Matrix
    expanded_target: np.ndarray

    @property
    def log_likelihood(self) -> float:
        last = self.log_alpha[:, -1]
        if last.shape[0] == 1:
            return float(last[0])
        return float(np.logaddexp(last[-1], last[-2]))

    def occupancy(self, log_posteriors: Matrix) -> Matrix:
        """Per-frame posterior mass of each output symbol."""
        log_l = self.log_likelihood
        n_frames, n_symbols = log_posteriors.shape
        emit = log_posteriors[:, self.expanded_target].T
        with np.errstate(invalid="ignore"):
            log_gamma = self.log_alpha + self.log_beta - emit - log_l
        log_gamma = np.where(np.isneginf(emit), -np.inf, log_gamma)
        out = np.zeros((n_frames, n_symbols))
        for s, k in enumerate(self.expanded_target):
            out[:, k] += np.exp(log_gamma[s])
        return out


def ctc_lattice(log_posteriors: ArrayLike, target: Sequence[int]) -> CtcLattice:
    logp = _check_posteriors(log_posteriors)
    n_frames, n_symbols = logp.shape
    ext, skip = _expand(target, n_symbols)
    n_states = ext.shape[0]
    emit = logp[:, ext].T

    log_alpha = np.full((n_states, n_frames), -np.inf)
    log_alpha[0, 0] = emit[0, 0]
    if n_states > 1:
        log_alpha[1, 0] = emit[1, 0]
    for t in range(1, n_frames):
        prev = log_alpha[:, t - 1]
        two_back = np.where(skip, _shift(prev, 2), -np.inf)
        log_alpha[:, t] = np.logaddexp(np.logaddexp(prev, _shift(prev, 1)), two_back) + emit[:, t]

    log_beta = np.full((n_states, n_frames), -np.inf)
    log_beta[-1, -1] = emit[-1, -1]
    if n_states > 1:
        log_beta[-2, -1] = emit[-2, -1]
    skip_from = _shift(skip.astype(np.float64), -2) > 0
    for t in range(n_frames - 2, -1, -1):
        nxt = log_beta[:, t + 1]
        two_ahead = np.where(skip_from, _shift(nxt, -2), -np.inf)
        log_beta[:, t] = np.logaddexp(np.logaddexp(nxt, _shift(nxt, -1)), two_ahead) + emit[:, t]

    return CtcLattice(log_alpha, log_beta, ext)


def ctc_log_likelihood(log_posteriors: ArrayLike, target: Sequence[int]) -> float:
    """log p(target | x); minus infinity when no alignment exists."""
    return ctc_lattice(log_posteriors, target).log_likelihood


def ctc_gradient(log_posteriors: ArrayLike, target: Sequence[int]) -> Matrix:
    """Gradient of -log p(target | x) with respect to the logits behind the posteriors."""
    logp = _check_posteriors(log_posteriors)
    lattice = ctc_lattice(logp, target)
    if not np.isfinite(lattice.log_likelihood):
        raise InfeasibleTargetError(target, logp.shape[0])
    return np.exp(logp) - lattice.occupancy(logp)


def ctc_loss(logits: ArrayLike, target: Sequence[int]) -> tuple[float, Matrix]:
    """Negative log-likelihood and its logit gradient from raw frame logits."""
    logp = special.log_softmax(np.asarray(logits, dtype=np.float64), axis=1)
    lattice = ctc_lattice(logp, target)
    log_l = lattice.log_likelihood
    if not np.isfinite(log_l):
        raise InfeasibleTargetError(target, logp.shape[0])
    return -log_l, np.exp(logp) - lattice.occupancy(logp)


# -- Decoding --


class Hypothesis(Struct, frozen=True, forbid_unknown_fields=True):
    labels: Labels
    score: float

    def __post_init__(self) -> None:
        if BLANK in self.labels:
            raise ValueError("hypothesis labels must not contain the blank")


def greedy_decode(log_posteriors: ArrayLike) -> Hypothesis:
    logp = _check_posteriors(log_posteriors)
    best = np.argmax(logp, axis=1)
    score = float(logp[np.arange(logp.shape[0]), best].sum())
    return Hypothesis(collapse(best), score)


class LexiconTrie:
    """Allowed continuations of every lexicon prefix, over label indices."""

    __slots__ = ("children", "entries")

    def __init__(self, entries: Iterable[Labels]) -> None:
        self.entries: Final[frozenset[Labels]] = frozenset(tuple(e) for e in entries)
        children: dict[Labels, set[int]] = {}
        for entry in self.entries:
            for i in range(len(entry)):
                children.setdefault(entry[:i], set()).add(entry[i])
        self.children: Final[dict[Labels, tuple[int, ...]]] = {
            k: tuple(sorted(v)) for k, v in children.items()
        }

    @classmethod
    def from_words(cls, words: Iterable[str], vocab: Vocabulary) -> Self:
        return cls(vocab.encode(w) for w in words)

    def next_symbols(self, prefix: Labels) -> tuple[int, ...]:
        return self.children.get(prefix, ())


def beam_search_decode(
    log_posteriors: ArrayLike,
    beam_width: int = DEFAULT_BEAM_WIDTH,
    lexicon: LexiconTrie | None = None,
) -> Hypothesis:
    """Prefix beam search; prefixes that collapse equally share probability mass."""
    if beam_width < 1:
        raise ValueError(f"beam_width must be at least 1, got {beam_width}")
    logp = _check_posteriors(log_posteriors)
    n_symbols = logp.shape[1]
    all_symbols = tuple(range(1, n_symbols))
    neg_inf = -np.inf

    # Each prefix carries (log mass ending in blank, log mass ending in its last symbol).
    beams: dict[Labels, tuple[float, float]] = {(): (0.0, neg_inf)}
    for row in logp:
        nxt: defaultdict[Labels, list[float]] = defaultdict(lambda: [neg_inf, neg_inf])
        for prefix, (pb, pnb) in beams.items():
            total = np.logaddexp(pb, pnb)
            cell = nxt[prefix]
            cell[0] = np.logaddexp(cell[0], total + row[BLANK])
            if prefix:
                cell[1] = np.logaddexp(cell[1], pnb + row[prefix[-1]])
            symbols = all_symbols if lexicon is None else lexicon.next_symbols(prefix)
            for k in symbols:
                extended = nxt[(*prefix, k)]
                source = pb if prefix and prefix[-1] == k else total
                extended[1] = np.logaddexp(extended[1], source + row[k])

        scored = [
            (float(np.logaddexp(pb, pnb)), prefix, (pb, pnb)) for prefix, (pb, pnb) in nxt.items()
        ]
        scored = [s for s in scored if s[0] > neg_inf]
        scored.sort(key=lambda s: (-s[0], s[1]))
        beams = {prefix: probs for _, prefix, probs in scored[:beam_width]}
        if not beams:
            break

    finals = [
        (float(np.logaddexp(pb, pnb)), prefix)
        for prefix, (pb, pnb) in beams.items()
        if lexicon is None or prefix in lexicon.entries
    ]
    if not finals:
        return Hypothesis((), float("-inf"))
    finals.sort(key=lambda s: (-s[0], s[1]))
    score, labels = finals[0]
    return Hypothesis(labels, score)
