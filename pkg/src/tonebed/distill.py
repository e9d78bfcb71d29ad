"""Frame-wise knowledge distillation from a frozen CTC teacher."""

from pathlib import Path
from typing import Annotated, Final

import numpy as np
from msgspec import Meta, Struct
from numpy.typing import ArrayLike
from scipy import special

from .losses import LossReport
from .numerics import Matrix
from .store import read_frames, write_frames


class KdConfig(Struct, frozen=True, forbid_unknown_fields=True):
    tau_kd: Annotated[float, Meta(gt=0.0)] = 3.0
    delta: Annotated[float, Meta(ge=0.0, le=1.0)] = 0.7

    def __post_init__(self) -> None:
        if self.tau_kd <= 0:
            raise ValueError(f"tau_kd must be positive, got {self.tau_kd}")
        if not 0.0 <= self.delta <= 1.0:
            raise ValueError(f"delta must lie in [0, 1], got {self.delta}")

    @property
    def uses_teacher(self) -> bool:
        return self.delta < 1.0


NO_KD: Final[KdConfig] = KdConfig(delta=1.0)


def soften(logits: ArrayLike, tau_kd: float) -> Matrix:
    """Row-wise log-softmax of logits / tau_kd."""
    if tau_kd <= 0:
        raise ValueError(f"temperature must be positive, got {tau_kd}")
    x = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    return special.log_softmax(x / tau_kd, axis=1)


def kd_loss(teacher_logits: ArrayLike, student_logits: ArrayLike, cfg: KdConfig) -> LossReport:
    """Mean over frames of KL(teacher || student), gradient for the student only."""
    t = np.atleast_2d(np.asarray(teacher_logits, dtype=np.float64))
    s = np.atleast_2d(np.asarray(student_logits, dtype=np.float64))
    if t.shape != s.shape:
        raise ValueError(f"shape mismatch: teacher {t.shape} vs student {s.shape}")
    log_p = soften(t, cfg.tau_kd)
    log_q = soften(s, cfg.tau_kd)
    p = np.exp(log_p)
    q = np.exp(log_q)
    n_frames = t.shape[0]

    terms = np.where(p > 0.0, p * (log_p - log_q), 0.0)
    value = float(terms.sum(axis=1).mean())
    grad = (q - p) / (cfg.tau_kd * n_frames)
    return LossReport(value, {"student_logits": grad}, {"kd": value})


def stage2_loss(ctc: LossReport, kd: LossReport | None, cfg: KdConfig) -> LossReport:
    """delta * CTC + (1 - delta) * KD with gradients combined the same way."""
    delta = cfg.delta
    if kd is None:
        if delta < 1.0:
            raise ValueError("KD component required when delta < 1")
        return LossReport(ctc.value, dict(ctc.grads), {"ctc": ctc.value})

    grads: dict[str, np.ndarray] = {}
    for name, g in ctc.grads.items():
        grads[name] = delta * g
    for name, g in kd.grads.items():
        grads[name] = grads[name] + (1.0 - delta) * g if name in grads else (1.0 - delta) * g
    value = delta * ctc.value + (1.0 - delta) * kd.value
    return LossReport(value, grads, {"ctc": ctc.value, "kd": kd.value})


class TeacherCache:
    """Per-token teacher logits stored as SITF files."""

    __slots__ = ("root",)

    def __init__(self, root: Path) -> None:
        self.root: Final[Path] = Path(root)

    def path(self, token_id: str) -> Path:
        return self.root / f"{token_id}.sitf"

    def __contains__(self, token_id: str) -> bool:
        return self.path(token_id).exists()

    def exists(self) -> bool:
        return self.root.is_dir() and any(self.root.glob("*.sitf"))

    def save(self, token_id: str, logits: ArrayLike) -> None:
        write_frames(self.path(token_id), logits)

    def load(self, token_id: str) -> Matrix:
        path = self.path(token_id)
        if not path.exists():
            raise FileNotFoundError(path)
        return read_frames(path)
