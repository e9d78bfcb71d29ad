"""Numeric kernels shared by every stage: embeddings, similarity, log-sum-exp, pooling.

All kernels accumulate in float64 and never mutate their inputs.
"""

from dataclasses import dataclass
from typing import Annotated, Final, Literal

import msgspec
import numpy as np
from msgspec import Meta, Struct
from numpy.typing import ArrayLike, NDArray
from scipy import special

DEGENERATE_NORM: Final[float] = 1e-9
NORM_TOLERANCE: Final[float] = 1e-6
DEFAULT_WEIGHTED_ALPHA: Final[float] = 0.7

type Vector = NDArray[np.float64]
type Matrix = NDArray[np.float64]


class DegenerateEmbeddingError(ValueError):
    def __init__(self, norm: float) -> None:
        super().__init__(f"degenerate embedding (norm {norm:.3e} < {DEGENERATE_NORM:g})")
        self.norm = norm


@dataclass(frozen=True, slots=True, eq=False)
class Embedding:
    values: Vector
    normalized: bool = False

    def __post_init__(self) -> None:
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 1 or values.size < 1:
            raise ValueError(f"Embedding must be a non-empty vector, got shape {values.shape}")
        if self.normalized:
            norm = float(np.linalg.norm(values))
            if abs(norm - 1.0) > NORM_TOLERANCE:
                raise ValueError(f"Embedding flagged normalized but has norm {norm:.9f}")
        object.__setattr__(self, "values", values)

    @property
    def dim(self) -> int:
        return int(self.values.shape[0])


@dataclass(frozen=True, slots=True, eq=False)
class FrameSequence:
    frames: Matrix

    def __post_init__(self) -> None:
        frames = np.asarray(self.frames, dtype=np.float64)
        if frames.ndim != 2 or frames.shape[0] < 1 or frames.shape[1] < 1:
            raise ValueError(f"FrameSequence must be a non-empty T x D matrix, got {frames.shape}")
        if not np.all(np.isfinite(frames)):
            raise ValueError("FrameSequence contains non-finite values")
        object.__setattr__(self, "frames", frames)

    @property
    def n_frames(self) -> int:
        return int(self.frames.shape[0])

    @property
    def dim(self) -> int:
        return int(self.frames.shape[1])


class PoolingMode(Struct, frozen=True, forbid_unknown_fields=True, omit_defaults=True):
    kind: Literal["mean", "max", "max_mean", "weighted"] = "mean"
    alpha: Annotated[float, Meta(ge=0.0, le=1.0)] | None = None

    def __post_init__(self) -> None:
        if self.kind == "weighted":
            if self.alpha is None:
                msgspec.structs.force_setattr(self, "alpha", DEFAULT_WEIGHTED_ALPHA)
            elif not 0.0 <= self.alpha <= 1.0:
                raise ValueError(f"weighted pooling alpha must lie in [0, 1], got {self.alpha}")
        elif self.alpha is not None:
            raise ValueError(f"alpha is only valid for weighted pooling, not {self.kind}")

    @property
    def max_weight(self) -> float:
        match self.kind:
            case "mean":
                return 0.0
            case "max":
                return 1.0
            case "max_mean":
                return 0.5
            case "weighted":
                assert self.alpha is not None
                return self.alpha


MEAN: Final[PoolingMode] = PoolingMode("mean")
MAX: Final[PoolingMode] = PoolingMode("max")
MAX_MEAN: Final[PoolingMode] = PoolingMode("max_mean")


def _vector(x: Embedding | ArrayLike) -> Vector:
    if isinstance(x, Embedding):
        return x.values
    values = np.asarray(x, dtype=np.float64)
    if values.ndim != 1 or values.size < 1:
        raise ValueError(f"expected a non-empty vector, got shape {values.shape}")
    return values


def _frames(x: FrameSequence | ArrayLike) -> Matrix:
    if isinstance(x, FrameSequence):
        return x.frames
    frames = np.asarray(x, dtype=np.float64)
    if frames.ndim != 2:
        raise ValueError(f"expected a T x D matrix, got shape {frames.shape}")
    if frames.shape[0] == 0:
        raise ValueError("cannot pool an empty frame sequence")
    return frames


def l2_normalize(x: Embedding | ArrayLike) -> Embedding:
    if isinstance(x, Embedding) and x.normalized:
        return x
    values = _vector(x)
    norm = float(np.linalg.norm(values))
    if norm < DEGENERATE_NORM:
        raise DegenerateEmbeddingError(norm)
    return Embedding(values / norm, normalized=True)


def normalize_rows(rows: ArrayLike) -> Matrix:
    """Row-wise l2 normalization with the same degenerate-vector rejection."""
    matrix = np.asarray(rows, dtype=np.float64)
    norms = np.linalg.norm(matrix, axis=1)
    if np.any(norms < DEGENERATE_NORM):
        raise DegenerateEmbeddingError(float(norms.min()))
    return matrix / norms[:, None]


def normalize_backward(raw: ArrayLike, grad: ArrayLike) -> Vector:
    """Pull a gradient at z = v/|v| back to v."""
    v = np.asarray(raw, dtype=np.float64)
    g = np.asarray(grad, dtype=np.float64)
    norm = float(np.linalg.norm(v))
    if norm < DEGENERATE_NORM:
        raise DegenerateEmbeddingError(norm)
    z = v / norm
    return (g - z * float(z @ g)) / norm


def cosine_similarity(u: Embedding | ArrayLike, v: Embedding | ArrayLike) -> float:
    a = l2_normalize(u).values
    b = l2_normalize(v).values
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape[0]} vs {b.shape[0]}")
    if np.array_equal(a, b):
        return 1.0
    return float(np.clip(a @ b, -1.0, 1.0))


def cosine_distance(u: Embedding | ArrayLike, v: Embedding | ArrayLike) -> float:
    return 1.0 - cosine_similarity(u, v)


def log_sum_exp(values: ArrayLike) -> float:
    x = np.asarray(values, dtype=np.float64).ravel()
    if x.size == 0:
        raise ValueError("log_sum_exp of an empty vector")
    if np.all(x == -np.inf):
        return -np.inf
    return float(special.logsumexp(x))


def log_softmax(rows: ArrayLike) -> Matrix:
    matrix = np.asarray(rows, dtype=np.float64)
    return special.log_softmax(matrix, axis=-1)


def pool(frames: FrameSequence | ArrayLike, mode: PoolingMode = MEAN) -> Embedding:
    h = _frames(frames)
    match mode.kind:
        case "mean":
            pooled = h.mean(axis=0)
        case "max":
            pooled = h.max(axis=0)
        case "max_mean":
            pooled = (h.max(axis=0) + h.mean(axis=0)) / 2.0
        case "weighted":
            w = mode.max_weight
            pooled = w * h.max(axis=0) + (1.0 - w) * h.mean(axis=0)
    return Embedding(pooled)


def pool_backward(frames: FrameSequence | ArrayLike, mode: PoolingMode, grad: ArrayLike) -> Matrix:
    """Adjoint of ``pool``; max routes each coordinate to its first arg-max frame."""
    h = _frames(frames)
    g = np.asarray(grad, dtype=np.float64)
    n_frames = h.shape[0]
    out = np.zeros_like(h)
    w = mode.max_weight
    if w < 1.0:
        out += (1.0 - w) * g / n_frames
    if w > 0.0:
        winners = np.argmax(h, axis=0)
        out[winners, np.arange(h.shape[1])] += w * g
    return out


def embed_frames(frames: FrameSequence | ArrayLike, mode: PoolingMode = MEAN) -> Embedding:
    """Pool then normalize."""
    return l2_normalize(pool(frames, mode))
