"""Frame-wise residual encoder stack with bottom-to-top block indexing.

Block ``k`` (1-based) maps ``h -> h + tanh(h W_k + b_k) V_k``. The hidden state
``h^(k)`` is the output after block ``k``; ``h^(0)`` is the input projection of
the features. Heads read ``h^(M)`` (CTC) or the pooled embedding (tone).
"""

import hashlib
import logging
from collections.abc import Iterable, Sequence
from dataclasses import dataclass
from typing import Annotated, Final, Literal, Self

import msgspec
import numpy as np
from msgspec import Meta, Struct
from numpy.typing import ArrayLike

from .ctc import Vocabulary
from .losses import ToneHead
from .numerics import MEAN, Embedding, FrameSequence, Matrix, PoolingMode, l2_normalize, pool
from .seeding import check_seed, substream

logger = logging.getLogger(__name__)

INPUT_GROUP: Final[str] = "input.P"
BLOCK_PARAMS: Final[tuple[str, ...]] = ("W", "b", "V")


class StackConfig(Struct, frozen=True, forbid_unknown_fields=True):
    M: Annotated[int, Meta(ge=1)] = 8
    D_hidden: Annotated[int, Meta(ge=1)] = 16
    feature_layer: Annotated[int, Meta(ge=1)] = 6
    freeze_bottom: Annotated[int, Meta(ge=0)] | None = None
    init: Literal["random", "identity"] = "random"
    init_scale: Annotated[float, Meta(ge=0.0)] = 0.3
    seed: Annotated[int, Meta(ge=0)] = 42

    def __post_init__(self) -> None:
        check_seed(self.seed)
        if self.freeze_bottom is None:
            msgspec.structs.force_setattr(self, "freeze_bottom", self.M // 2)
        if not 1 <= self.feature_layer <= self.M:
            raise ValueError(f"feature_layer must lie in 1..{self.M}, got {self.feature_layer}")
        if not self.frozen_blocks < self.feature_layer:
            raise ValueError(
                f"freeze_bottom ({self.frozen_blocks}) must be below feature_layer "
                f"({self.feature_layer})"
            )

    @property
    def frozen_blocks(self) -> int:
        assert self.freeze_bottom is not None
        return self.freeze_bottom


def block_groups(blocks: Iterable[int]) -> tuple[str, ...]:
    return tuple(f"blocks.{k}.{p}" for k in blocks for p in BLOCK_PARAMS)


def stage1_groups(cfg: StackConfig) -> tuple[str, ...]:
    blocks = block_groups(range(cfg.frozen_blocks + 1, cfg.feature_layer + 1))
    return (*blocks, "tone_head.W", "tone_head.b")


def stage2_groups(cfg: StackConfig) -> tuple[str, ...]:
    blocks = block_groups(range(cfg.feature_layer + 1, cfg.M + 1))
    return (*blocks, "ctc_head.W", "ctc_head.b")


def teacher_groups(cfg: StackConfig) -> tuple[str, ...]:
    blocks = block_groups(range(cfg.frozen_blocks + 1, cfg.M + 1))
    return (*blocks, "ctc_head.W", "ctc_head.b")


@dataclass(frozen=True, slots=True, eq=False)
class FrameBatch:
    """Several tokens' frames stacked along time, with segment offsets."""

    frames: Matrix
    offsets: np.ndarray

    @classmethod
    def of(cls, sequences: Sequence[ArrayLike]) -> Self:
        mats = [np.asarray(s, dtype=np.float64) for s in sequences]
        if not mats:
            raise ValueError("cannot batch zero sequences")
        lengths = [m.shape[0] for m in mats]
        if min(lengths) < 1:
            raise ValueError("cannot batch an empty frame sequence")
        offsets = np.concatenate(([0], np.cumsum(lengths)))
        return cls(np.concatenate(mats), offsets)

    def __len__(self) -> int:
        return len(self.offsets) - 1

    def segment(self, i: int, h: Matrix) -> Matrix:
        return h[self.offsets[i] : self.offsets[i + 1]]


@dataclass(frozen=True, slots=True, eq=False)
class ForwardCache:
    """States h^(0)..h^(upto) and block activations a_1..a_upto of one forward pass."""

    states: list[Matrix]
    acts: list[Matrix]

    @property
    def top(self) -> Matrix:
        return self.states[-1]

    def state(self, k: int) -> Matrix:
        return self.states[k]


class EncoderStack:
    __slots__ = ("config", "feature_dim", "n_tones", "params", "vocabulary")

    def __init__(
        self,
        config: StackConfig,
        params: dict[str, np.ndarray],
        vocabulary: Vocabulary,
        n_tones: int,
        feature_dim: int,
    ) -> None:
        self.config: Final[StackConfig] = config
        self.vocabulary: Final[Vocabulary] = vocabulary
        self.n_tones: Final[int] = n_tones
        self.feature_dim: Final[int] = feature_dim
        expected = parameter_shapes(config, feature_dim, vocabulary.size, n_tones)
        if set(params) != set(expected):
            missing = sorted(set(expected) - set(params))
            extra = sorted(set(params) - set(expected))
            raise ValueError(f"parameter groups mismatch: missing {missing}, unexpected {extra}")
        for name, shape in expected.items():
            if params[name].shape != shape:
                raise ValueError(f"{name}: expected shape {shape}, got {params[name].shape}")
        self.params: dict[str, np.ndarray] = params

    @classmethod
    def initialize(
        cls, config: StackConfig, feature_dim: int, vocabulary: Vocabulary, n_tones: int
    ) -> Self:
        H = config.D_hidden
        params: dict[str, np.ndarray] = {INPUT_GROUP: np.eye(feature_dim, H)}
        rng = substream(config.seed, "init")
        bound = 1.0 / np.sqrt(H)
        for k in range(1, config.M + 1):
            if config.init == "identity":
                W = np.zeros((H, H))
                V = np.zeros((H, H))
            else:
                W = rng.uniform(-bound, bound, size=(H, H))
                V = config.init_scale * rng.uniform(-bound, bound, size=(H, H))
            params[f"blocks.{k}.W"] = W
            params[f"blocks.{k}.b"] = np.zeros(H)
            params[f"blocks.{k}.V"] = V
        params["ctc_head.W"] = rng.uniform(-bound, bound, size=(H, vocabulary.size))
        params["ctc_head.b"] = np.zeros(vocabulary.size)
        params["tone_head.W"] = np.zeros((n_tones, H))
        params["tone_head.b"] = np.zeros(n_tones)
        logger.debug(
            "initialized %d blocks (%s, H=%d), vocabulary %d, %d tones",
            config.M,
            config.init,
            H,
            vocabulary.size,
            n_tones,
        )
        return cls(config, params, vocabulary, n_tones, feature_dim)

    def copy(self) -> Self:
        params = {k: v.copy() for k, v in self.params.items()}
        return type(self)(self.config, params, self.vocabulary, self.n_tones, self.feature_dim)

    @property
    def tone_head(self) -> ToneHead:
        return ToneHead(self.params["tone_head.W"], self.params["tone_head.b"])

    def _check_upto(self, upto: int) -> None:
        if not 0 <= upto <= self.config.M:
            raise ValueError(f"block index {upto} outside 0..{self.config.M}")

    def run(self, frames: ArrayLike, upto: int) -> ForwardCache:
        self._check_upto(upto)
        x = np.asarray(frames, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.feature_dim:
            raise ValueError(f"expected frames of width {self.feature_dim}, got shape {x.shape}")
        h = x @ self.params[INPUT_GROUP]
        states = [h]
        acts: list[Matrix] = []
        for k in range(1, upto + 1):
            a = np.tanh(h @ self.params[f"blocks.{k}.W"] + self.params[f"blocks.{k}.b"])
            h = h + a @ self.params[f"blocks.{k}.V"]
            acts.append(a)
            states.append(h)
        return ForwardCache(states, acts)

    def resume(self, cache: ForwardCache, upto: int) -> ForwardCache:
        """Continue a forward pass from the last cached state."""
        self._check_upto(upto)
        states = list(cache.states)
        acts = list(cache.acts)
        h = states[-1]
        for k in range(len(states), upto + 1):
            a = np.tanh(h @ self.params[f"blocks.{k}.W"] + self.params[f"blocks.{k}.b"])
            h = h + a @ self.params[f"blocks.{k}.V"]
            acts.append(a)
            states.append(h)
        return ForwardCache(states, acts)

    def forward(self, features: FrameSequence | ArrayLike, upto: int) -> list[FrameSequence]:
        """Hidden states h^(1)..h^(upto)."""
        x = features.frames if isinstance(features, FrameSequence) else features
        cache = self.run(x, upto)
        return [FrameSequence(h) for h in cache.states[1:]]

    def extract_embedding(
        self,
        features: FrameSequence | ArrayLike,
        layer: int | None = None,
        mode: PoolingMode = MEAN,
    ) -> Embedding:
        layer = self.config.feature_layer if layer is None else layer
        if layer < 1:
            raise ValueError(f"embedding layer must be at least 1, got {layer}")
        x = features.frames if isinstance(features, FrameSequence) else features
        return l2_normalize(pool(self.run(x, layer).top, mode))

    def ctc_logits(self, h_top: Matrix) -> Matrix:
        return h_top @ self.params["ctc_head.W"] + self.params["ctc_head.b"]

    def logits(self, features: ArrayLike) -> Matrix:
        return self.ctc_logits(self.run(features, self.config.M).top)

    def backward(
        self, cache: ForwardCache, grad_top: Matrix, lowest: int
    ) -> dict[str, np.ndarray]:
        """Gradients of blocks ``lowest``..top given the gradient at the cached top state."""
        top = len(cache.acts)
        if not 1 <= lowest <= top + 1:
            raise ValueError(f"cannot backpropagate to block {lowest} from block {top}")
        grads: dict[str, np.ndarray] = {}
        gy = grad_top
        for k in range(top, lowest - 1, -1):
            x = cache.state(k - 1)
            a = cache.acts[k - 1]
            grads[f"blocks.{k}.V"] = a.T @ gy
            gz = (gy @ self.params[f"blocks.{k}.V"].T) * (1.0 - a * a)
            grads[f"blocks.{k}.W"] = x.T @ gz
            grads[f"blocks.{k}.b"] = gz.sum(axis=0)
            if k > lowest:
                gy = gy + gz @ self.params[f"blocks.{k}.W"].T
        return grads

    def checksum(self, groups: Iterable[str] | None = None) -> str:
        return parameter_checksum(self.params, groups)


def parameter_shapes(
    config: StackConfig, feature_dim: int, n_outputs: int, n_tones: int
) -> dict[str, tuple[int, ...]]:
    H = config.D_hidden
    shapes: dict[str, tuple[int, ...]] = {INPUT_GROUP: (feature_dim, H)}
    for k in range(1, config.M + 1):
        shapes[f"blocks.{k}.W"] = (H, H)
        shapes[f"blocks.{k}.b"] = (H,)
        shapes[f"blocks.{k}.V"] = (H, H)
    shapes["ctc_head.W"] = (H, n_outputs)
    shapes["ctc_head.b"] = (n_outputs,)
    shapes["tone_head.W"] = (n_tones, H)
    shapes["tone_head.b"] = (n_tones,)
    return shapes


def parameter_checksum(params: dict[str, np.ndarray], groups: Iterable[str] | None = None) -> str:
    names = sorted(params) if groups is None else sorted(groups)
    digest = hashlib.sha256()
    for name in names:
        digest.update(name.encode("utf-8"))
        digest.update(np.ascontiguousarray(params[name], dtype="<f8").tobytes())
    return digest.hexdigest()
