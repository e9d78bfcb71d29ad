"""AdamW with linear warmup, global-norm clipping and gradient accumulation."""

from collections.abc import Mapping, Sequence
from typing import Annotated, Final

import numpy as np
from msgspec import Meta, Struct


class OptimizerConfig(Struct, frozen=True, forbid_unknown_fields=True):
    learning_rate: Annotated[float, Meta(gt=0.0)] = 5e-4
    weight_decay: Annotated[float, Meta(ge=0.0)] = 0.01
    grad_clip: Annotated[float, Meta(gt=0.0)] = 1.0
    warmup_steps: Annotated[int, Meta(ge=0)] = 200
    total_steps: Annotated[int, Meta(ge=0)] = 2000
    batch_size: Annotated[int, Meta(ge=1)] = 16
    accumulation_steps: Annotated[int, Meta(ge=1)] = 1
    beta1: Annotated[float, Meta(ge=0.0, lt=1.0)] = 0.9
    beta2: Annotated[float, Meta(ge=0.0, lt=1.0)] = 0.999
    eps: Annotated[float, Meta(gt=0.0)] = 1e-8

    def __post_init__(self) -> None:
        if self.grad_clip <= 0:
            raise ValueError("grad_clip must be positive")
        if self.warmup_steps > self.total_steps:
            raise ValueError(
                f"warmup_steps ({self.warmup_steps}) exceeds total_steps ({self.total_steps})"
            )

    def learning_rate_at(self, step: int) -> float:
        """Rate for 0-based optimizer step ``step``."""
        if step < self.warmup_steps:
            return self.learning_rate * (step + 1) / self.warmup_steps
        return self.learning_rate


class StepStats(Struct, frozen=True):
    learning_rate: float
    grad_norm: float
    clipped_norm: float


def global_norm(grads: Mapping[str, np.ndarray]) -> float:
    return float(np.sqrt(sum(float(np.sum(g * g)) for _, g in sorted(grads.items()))))


class GradientAccumulator:
    """Sums micro-batch gradients in arrival order and averages on release."""

    __slots__ = ("_count", "_sums", "groups")

    def __init__(self, groups: Sequence[str]) -> None:
        self.groups: Final[tuple[str, ...]] = tuple(groups)
        self._sums: dict[str, np.ndarray] = {}
        self._count = 0

    def add(self, grads: Mapping[str, np.ndarray]) -> None:
        for name in self.groups:
            if name not in grads:
                continue
            if name in self._sums:
                self._sums[name] = self._sums[name] + grads[name]
            else:
                self._sums[name] = np.array(grads[name], dtype=np.float64)
        self._count += 1

    def release(self) -> dict[str, np.ndarray]:
        if self._count == 0:
            raise ValueError("no gradients accumulated")
        out = {name: g / self._count for name, g in self._sums.items()}
        self._sums = {}
        self._count = 0
        return out


class AdamW:
    """Updates only the named groups; every other array in ``params`` is left untouched."""

    __slots__ = ("_m", "_v", "config", "groups", "steps_taken")

    def __init__(self, config: OptimizerConfig, groups: Sequence[str]) -> None:
        self.config: Final[OptimizerConfig] = config
        self.groups: Final[tuple[str, ...]] = tuple(groups)
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}
        self.steps_taken = 0

    def step(self, params: dict[str, np.ndarray], grads: Mapping[str, np.ndarray]) -> StepStats:
        cfg = self.config
        trainable = {name: grads[name] for name in self.groups if name in grads}
        norm = global_norm(trainable)
        scale = cfg.grad_clip / norm if norm > cfg.grad_clip else 1.0
        lr = cfg.learning_rate_at(self.steps_taken)
        self.steps_taken += 1
        t = self.steps_taken
        bias1 = 1.0 - cfg.beta1**t
        bias2 = 1.0 - cfg.beta2**t

        for name in self.groups:
            if name not in trainable:
                continue
            g = trainable[name] * scale
            m = cfg.beta1 * self._m.get(name, np.zeros_like(g)) + (1.0 - cfg.beta1) * g
            v = cfg.beta2 * self._v.get(name, np.zeros_like(g)) + (1.0 - cfg.beta2) * g * g
            self._m[name] = m
            self._v[name] = v
            update = (m / bias1) / (np.sqrt(v / bias2) + cfg.eps)
            p = params[name]
            # Biases are not decayed.
            decay = cfg.weight_decay * p if p.ndim > 1 else 0.0
            params[name] = p - lr * (update + decay)

        return StepStats(lr, norm, norm * scale)
