"""Stage-1 objectives with closed-form gradients.

Every loss works on the dot products of the vectors it is given. Callers pass
unit vectors; gradients are taken with respect to those vectors as stored, so
the pull-back through normalization stays with the encoder.
"""

from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field
from typing import Annotated, Self

import numpy as np
from msgspec import Meta, Struct
from numpy.typing import ArrayLike

from .corpus import PairSet
from .numerics import Embedding, Matrix, Vector, log_softmax, log_sum_exp

Temperature = Annotated[float, Meta(gt=0.0)]
Weight = Annotated[float, Meta(ge=0.0, le=1.0)]


class NoTonePositivesError(ValueError):
    def __init__(self) -> None:
        super().__init__("no tone positives")


class Stage1Config(Struct, frozen=True, forbid_unknown_fields=True):
    tau_g: Temperature = 0.07
    tau_t: Temperature = 0.07
    N: Annotated[int, Meta(ge=1)] = 20
    alpha: Weight = 0.5
    lambda_cls: Annotated[float, Meta(ge=0.0)] = 1.0
    max_positives: Annotated[int, Meta(ge=1)] = 4
    n_soft: Annotated[int, Meta(ge=1)] | None = None
    negative_gradients: bool = True

    def __post_init__(self) -> None:
        if self.tau_g <= 0 or self.tau_t <= 0:
            raise ValueError("temperatures must be strictly positive")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")

    @property
    def soft_cap(self) -> int:
        return self.N if self.n_soft is None else self.n_soft


class MarginConfig(Struct, frozen=True, forbid_unknown_fields=True):
    m_hard: float = -0.1
    m_soft: float = 0.1
    lambda_attr: Annotated[float, Meta(ge=0.0)] = 1.0
    lambda_hard: Annotated[float, Meta(ge=0.0)] = 0.5
    lambda_soft: Annotated[float, Meta(ge=0.0)] = 1.0

    def __post_init__(self) -> None:
        if not self.m_hard < self.m_soft:
            raise ValueError(f"m_hard ({self.m_hard}) must be below m_soft ({self.m_soft})")


@dataclass(frozen=True, slots=True, eq=False)
class ToneHead:
    W: Matrix
    b: Vector

    def __post_init__(self) -> None:
        W = np.asarray(self.W, dtype=np.float64)
        b = np.asarray(self.b, dtype=np.float64)
        if W.ndim != 2 or b.shape != (W.shape[0],):
            raise ValueError(f"ToneHead shapes disagree: W {W.shape}, b {b.shape}")
        if not (np.all(np.isfinite(W)) and np.all(np.isfinite(b))):
            raise ValueError("ToneHead has non-finite entries")
        object.__setattr__(self, "W", W)
        object.__setattr__(self, "b", b)

    @classmethod
    def zeros(cls, n_tones: int, dim: int) -> Self:
        return cls(np.zeros((n_tones, dim)), np.zeros(n_tones))

    @property
    def n_tones(self) -> int:
        return int(self.W.shape[0])

    def logits(self, z: ArrayLike) -> Vector:
        return self.W @ np.asarray(z, dtype=np.float64) + self.b


@dataclass(frozen=True, slots=True, eq=False)
class LossReport:
    value: float
    grads: dict[str, np.ndarray]
    components: dict[str, float] = field(default_factory=dict)

    def __post_init__(self) -> None:
        for name, g in self.grads.items():
            if not np.all(np.isfinite(g)):
                raise FloatingPointError(f"non-finite gradient in group {name}")

    def grad(self, name: str) -> np.ndarray:
        return self.grads[name]


def _vec(x: Embedding | ArrayLike) -> Vector:
    if isinstance(x, Embedding):
        return x.values
    return np.asarray(x, dtype=np.float64)


def _stack(xs: Sequence[Embedding | ArrayLike], dim: int) -> Matrix:
    if not xs:
        return np.zeros((0, dim))
    rows = np.stack([_vec(x) for x in xs])
    if rows.shape[1] != dim:
        raise ValueError(f"dimension mismatch: {rows.shape[1]} vs {dim}")
    return rows


def speaker_infonce(
    anchor: Embedding | ArrayLike,
    positive: Embedding | ArrayLike,
    negatives: Sequence[Embedding | ArrayLike],
    cfg: Stage1Config,
) -> LossReport:
    if not negatives:
        raise ValueError("speaker InfoNCE needs at least one negative")
    z = _vec(anchor)
    zp = _vec(positive)
    if zp.shape != z.shape:
        raise ValueError(f"dimension mismatch: {zp.shape[0]} vs {z.shape[0]}")
    zn = _stack(negatives, z.shape[0])
    tau = cfg.tau_g

    logits = np.concatenate(([z @ zp], zn @ z)) / tau
    lse = log_sum_exp(logits)
    value = lse - logits[0]
    p = np.exp(logits - lse)

    coef_pos = p[0] - 1.0
    coef_neg = p[1:]
    grads: dict[str, np.ndarray] = {
        "anchor": (coef_pos * zp + coef_neg @ zn) / tau,
        "positive": coef_pos * z / tau,
    }
    for k, c in enumerate(coef_neg):
        grads[f"negatives[{k}]"] = c * z / tau if cfg.negative_gradients else np.zeros_like(z)
    return LossReport(float(value), grads, {"speaker": float(value)})


def tone_infonce(
    anchor: Embedding | ArrayLike,
    P: Sequence[Embedding | ArrayLike],
    H: Sequence[Embedding | ArrayLike],
    S: Sequence[Embedding | ArrayLike],
    cfg: Stage1Config,
) -> LossReport:
    if not P:
        raise NoTonePositivesError
    z = _vec(anchor)
    dim = z.shape[0]
    zp, zh, zs = _stack(P, dim), _stack(H, dim), _stack(S, dim)
    members = np.concatenate((zp, zh, zs))
    tau = cfg.tau_t

    sims = members @ z / tau
    lse = log_sum_exp(sims)
    n_pos = zp.shape[0]
    value = lse - float(sims[:n_pos].mean())

    coef = np.exp(sims - lse)
    coef[:n_pos] -= 1.0 / n_pos
    grads: dict[str, np.ndarray] = {"anchor": coef @ members / tau}
    for j in range(n_pos):
        grads[f"positives[{j}]"] = coef[j] * z / tau
    offset = n_pos
    for prefix, count in (("hard", zh.shape[0]), ("soft", zs.shape[0])):
        for j in range(count):
            g = coef[offset + j] * z / tau
            grads[f"{prefix}[{j}]"] = g if cfg.negative_gradients else np.zeros_like(z)
        offset += count
    return LossReport(float(value), grads, {"tone": float(value)})


def tone_classifier_ce(z: Embedding | ArrayLike, head: ToneHead, t: int) -> LossReport:
    if not 1 <= t <= head.n_tones:
        raise ValueError(f"tone {t} outside 1..{head.n_tones}")
    zv = _vec(z)
    if zv.shape[0] != head.W.shape[1]:
        raise ValueError(f"dimension mismatch: {zv.shape[0]} vs {head.W.shape[1]}")
    logp = log_softmax(head.logits(zv))
    value = -float(logp[t - 1])
    g = np.exp(logp)
    g[t - 1] -= 1.0
    return LossReport(
        value,
        {"tone_head.W": np.outer(g, zv), "tone_head.b": g, "anchor": head.W.T @ g},
        {"tone_cls": value},
    )


def margin_tone_loss(
    anchor: Embedding | ArrayLike,
    P: Sequence[Embedding | ArrayLike],
    H: Sequence[Embedding | ArrayLike],
    S: Sequence[Embedding | ArrayLike],
    mcfg: MarginConfig,
    *,
    negative_gradients: bool = True,
) -> LossReport:
    """Attraction to P plus hinges on H and S; an empty set contributes nothing.

    With ``negative_gradients`` off the hinges still move the anchor, but H and S
    receive zero gradient.
    """
    z = _vec(anchor)
    dim = z.shape[0]
    grads: dict[str, np.ndarray] = {"anchor": np.zeros(dim)}
    components = {"attr": 0.0, "hard": 0.0, "soft": 0.0}

    zp = _stack(P, dim)
    if zp.shape[0]:
        w = mcfg.lambda_attr / zp.shape[0]
        components["attr"] = -mcfg.lambda_attr * float((zp @ z).mean())
        grads["anchor"] -= w * zp.sum(axis=0)
        for j in range(zp.shape[0]):
            grads[f"positives[{j}]"] = -w * z

    for prefix, xs, m, lam in (
        ("hard", H, mcfg.m_hard, mcfg.lambda_hard),
        ("soft", S, mcfg.m_soft, mcfg.lambda_soft),
    ):
        rows = _stack(xs, dim)
        if not rows.shape[0]:
            continue
        excess = rows @ z - m
        active = excess > 0.0
        w = lam / rows.shape[0]
        components[prefix] = lam * float(np.where(active, excess, 0.0).mean())
        grads["anchor"] += w * rows[active].sum(axis=0)
        for j in range(rows.shape[0]):
            pushed = active[j] and negative_gradients
            grads[f"{prefix}[{j}]"] = w * z if pushed else np.zeros(dim)

    value = components["attr"] + components["hard"] + components["soft"]
    return LossReport(value, grads, {"margin": value, **components})


def _add(grads: dict[str, np.ndarray], key: str, g: np.ndarray, weight: float) -> None:
    if key in grads:
        grads[key] = grads[key] + weight * g
    else:
        grads[key] = weight * g


def stage1_loss(
    batch: Sequence[PairSet],
    embeddings: Mapping[str, Vector],
    tones: Mapping[str, int],
    head: ToneHead,
    cfg: Stage1Config,
    *,
    margin: MarginConfig | None = None,
    tone_embeddings: Mapping[str, Vector] | None = None,
) -> LossReport:
    """Weighted speaker and tone objectives over a minibatch of mined anchors.

    Gradients are keyed ``emb/<token id>`` for embeddings plus the tone head
    groups. Anchors without a cross-gender positive feed only the tone term;
    anchors without tone positives feed only the classifier part of it.

    With ``tone_embeddings`` the tone terms and the classifier read those
    vectors instead, and their gradients are keyed ``tone_emb/<token id>``.
    """
    if not batch:
        raise ValueError("stage1_loss needs a non-empty batch")

    speaker_items = [ps for ps in batch if ps.cross_gender_positive is not None]
    n_tone = len(batch)
    alpha = cfg.alpha

    grads: dict[str, np.ndarray] = {}
    speaker_total = 0.0
    if speaker_items:
        w = alpha / len(speaker_items)
        for ps in speaker_items:
            assert ps.cross_gender_positive is not None
            rep = speaker_infonce(
                embeddings[ps.anchor],
                embeddings[ps.cross_gender_positive],
                [embeddings[k] for k in ps.contrastive_negatives],
                cfg,
            )
            speaker_total += rep.value
            _add(grads, f"emb/{ps.anchor}", rep.grads["anchor"], w)
            _add(grads, f"emb/{ps.cross_gender_positive}", rep.grads["positive"], w)
            for k, nid in enumerate(ps.contrastive_negatives):
                _add(grads, f"emb/{nid}", rep.grads[f"negatives[{k}]"], w)
    speaker_mean = speaker_total / len(speaker_items) if speaker_items else 0.0

    tone_vecs = embeddings if tone_embeddings is None else tone_embeddings
    tone_key = "emb" if tone_embeddings is None else "tone_emb"
    w_tone = (1.0 - alpha) / n_tone
    tone_total = 0.0
    cls_total = 0.0
    for ps in batch:
        z = tone_vecs[ps.anchor]
        members = {
            "positives": ps.tone_positives,
            "hard": ps.hard_negatives,
            "soft": ps.soft_negatives,
        }
        vecs = {name: [tone_vecs[k] for k in ids] for name, ids in members.items()}
        if margin is not None:
            rep = margin_tone_loss(
                z,
                vecs["positives"],
                vecs["hard"],
                vecs["soft"],
                margin,
                negative_gradients=cfg.negative_gradients,
            )
        elif ps.tone_positives:
            rep = tone_infonce(z, vecs["positives"], vecs["hard"], vecs["soft"], cfg)
        else:
            rep = None
        if rep is not None:
            tone_total += rep.value
            _add(grads, f"{tone_key}/{ps.anchor}", rep.grads["anchor"], w_tone)
            for name, ids in members.items():
                for j, mid in enumerate(ids):
                    key = f"{name}[{j}]"
                    if key in rep.grads:
                        _add(grads, f"{tone_key}/{mid}", rep.grads[key], w_tone)

        cls = tone_classifier_ce(z, head, tones[ps.anchor])
        cls_total += cls.value
        w_cls = w_tone * cfg.lambda_cls
        _add(grads, f"{tone_key}/{ps.anchor}", cls.grads["anchor"], w_cls)
        _add(grads, "tone_head.W", cls.grads["tone_head.W"], w_cls)
        _add(grads, "tone_head.b", cls.grads["tone_head.b"], w_cls)

    tone_mean = tone_total / n_tone
    cls_mean = cls_total / n_tone
    value = alpha * speaker_mean + (1.0 - alpha) * (tone_mean + cfg.lambda_cls * cls_mean)
    components = {
        "speaker": speaker_mean,
        "margin" if margin is not None else "tone": tone_mean,
        "tone_cls": cls_mean,
    }
    return LossReport(float(value), grads, components)
