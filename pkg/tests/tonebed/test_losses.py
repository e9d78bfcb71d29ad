"""Tests for losses.py - closed-form values and analytic gradients of the Stage-1 objectives."""

import itertools
import math

import numpy as np
import pytest

from tonebed.corpus import PairSet
from tonebed.losses import (
    MarginConfig,
    NoTonePositivesError,
    Stage1Config,
    ToneHead,
    margin_tone_loss,
    speaker_infonce,
    stage1_loss,
    tone_classifier_ce,
    tone_infonce,
)

from .helpers.oracles import finite_difference, relative_error, unit_rows

GRAD_TOL = 1e-4


def _split(rows: np.ndarray, sizes: tuple[int, ...]) -> list[list[np.ndarray]]:
    out, start = [], 0
    for n in sizes:
        out.append([rows[start + i] for i in range(n)])
        start += n
    return out


# ============================================================================
# Speaker InfoNCE
# ============================================================================


def test_speaker_infonce_uniform_softmax_is_ln2():
    """tau 1, one negative, equal similarities."""
    rep = speaker_infonce([1.0, 0.0], [0.0, 1.0], [[0.0, -1.0]], Stage1Config(tau_g=1.0))
    assert rep.value == pytest.approx(math.log(2), abs=1e-12)


def test_speaker_infonce_confident_positive():
    """Positive equal to anchor, one orthogonal negative at tau 0.07."""
    rep = speaker_infonce([1.0, 0.0], [1.0, 0.0], [[0.0, 1.0]], Stage1Config())
    assert rep.value == pytest.approx(math.log1p(math.exp(-1 / 0.07)), rel=1e-6)


def test_speaker_infonce_needs_negatives():
    """An empty negative list is rejected."""
    with pytest.raises(ValueError, match="at least one negative"):
        speaker_infonce([1.0, 0.0], [1.0, 0.0], [], Stage1Config())


def test_speaker_infonce_gradients_match_finite_differences():
    """Anchor, positive and every negative gradient agree with central differences."""
    rng = np.random.default_rng(10)
    cfg = Stage1Config(tau_g=0.2)
    for _ in range(25):
        rows = unit_rows(rng, 6, 5)
        rep = speaker_infonce(rows[0], rows[1], list(rows[2:]), cfg)

        def f(x):
            return speaker_infonce(x[0], x[1], list(x[2:]), cfg).value

        numeric = finite_difference(f, rows.copy())
        assert relative_error(rep.grad("anchor"), numeric[0]) < GRAD_TOL
        assert relative_error(rep.grad("positive"), numeric[1]) < GRAD_TOL
        for k in range(4):
            assert relative_error(rep.grad(f"negatives[{k}]"), numeric[2 + k]) < GRAD_TOL


def test_speaker_infonce_negative_order_does_not_matter():
    """Permuting the negative list leaves the value unchanged."""
    rng = np.random.default_rng(11)
    rows = unit_rows(rng, 8, 4)
    negs = list(rows[2:])
    base = speaker_infonce(rows[0], rows[1], negs, Stage1Config()).value
    for perm in (rng.permutation(len(negs)) for _ in range(10)):
        shuffled = [negs[i] for i in perm]
        value = speaker_infonce(rows[0], rows[1], shuffled, Stage1Config()).value
        assert value == pytest.approx(base, abs=1e-13)


def test_speaker_infonce_sharper_temperature_helps_a_winning_positive():
    """With s+ above every negative, lowering tau lowers the loss."""
    anchor = np.array([1.0, 0.0, 0.0])
    positive = np.array([0.8, 0.6, 0.0])
    negatives = [np.array([0.5, 0.0, np.sqrt(0.75)]), np.array([0.0, 1.0, 0.0])]
    values = [
        speaker_infonce(anchor, positive, negatives, Stage1Config(tau_g=tau)).value
        for tau in (1.0, 0.5, 0.2, 0.07)
    ]
    assert all(a > b for a, b in itertools.pairwise(values))


def test_negative_gradients_can_be_stopped():
    """With negative_gradients off, negative groups are exactly zero."""
    rng = np.random.default_rng(12)
    rows = unit_rows(rng, 4, 3)
    rep = speaker_infonce(rows[0], rows[1], list(rows[2:]), Stage1Config(negative_gradients=False))
    assert not rep.grad("negatives[0]").any()
    assert not rep.grad("negatives[1]").any()
    assert rep.grad("anchor").any()


# ============================================================================
# Tone InfoNCE
# ============================================================================


def test_tone_infonce_equal_similarities():
    """One positive and k negatives, all at the same similarity, give ln(k + 1)."""
    anchor = [1.0, 0.0, 0.0]
    same = [0.0, 1.0, 0.0]
    for k_hard, k_soft in ((1, 0), (0, 3), (2, 2)):
        rep = tone_infonce(anchor, [same], [same] * k_hard, [same] * k_soft, Stage1Config())
        assert rep.value == pytest.approx(math.log(k_hard + k_soft + 1), abs=1e-12)


def test_tone_infonce_confident_positive():
    """Positive equal to the anchor against two orthogonal negatives."""
    e1, e2, e3 = np.eye(3)
    rep = tone_infonce(e1, [e1], [e2], [e3], Stage1Config())
    assert rep.value == pytest.approx(math.log1p(2 * math.exp(-1 / 0.07)), rel=1e-6)


def test_tone_infonce_without_positives():
    """An empty positive set raises the no-positives error."""
    with pytest.raises(NoTonePositivesError, match="no tone positives"):
        tone_infonce([1.0, 0.0], [], [[0.0, 1.0]], [], Stage1Config())


def test_tone_infonce_gradients_match_finite_differences():
    """Gradients for the anchor and every member agree with central differences."""
    rng = np.random.default_rng(13)
    cfg = Stage1Config(tau_t=0.3)
    sizes = (2, 2, 3)
    for _ in range(20):
        rows = unit_rows(rng, 1 + sum(sizes), 5)

        def f(x):
            P, H, S = _split(x[1:], sizes)
            return tone_infonce(x[0], P, H, S, cfg).value

        P, H, S = _split(rows[1:], sizes)
        rep = tone_infonce(rows[0], P, H, S, cfg)
        numeric = finite_difference(f, rows.copy())
        assert relative_error(rep.grad("anchor"), numeric[0]) < GRAD_TOL
        names = [f"positives[{j}]" for j in range(2)]
        names += [f"hard[{j}]" for j in range(2)] + [f"soft[{j}]" for j in range(3)]
        for i, name in enumerate(names, start=1):
            assert relative_error(rep.grad(name), numeric[i]) < GRAD_TOL


# ============================================================================
# Tone classifier
# ============================================================================


def test_tone_classifier_zero_head_is_uniform():
    """Zero weights over 7 tones give ln 7."""
    rep = tone_classifier_ce([0.6, 0.8], ToneHead.zeros(7, 2), 3)
    assert rep.value == pytest.approx(math.log(7), abs=1e-12)


def test_tone_classifier_confident_bias_drives_loss_down():
    """A growing bias on the true tone strictly lowers the loss."""
    values = []
    for mag in (1.0, 5.0, 10.0):
        b = np.zeros(4)
        b[1] = mag
        values.append(tone_classifier_ce([1.0, 0.0], ToneHead(np.zeros((4, 2)), b), 2).value)
    assert values[0] > values[1] > values[2] > 0.0


def test_tone_classifier_rejects_out_of_range_tone():
    """Tones outside 1..T are errors."""
    head = ToneHead.zeros(4, 2)
    for bad in (0, 5):
        with pytest.raises(ValueError, match="outside"):
            tone_classifier_ce([1.0, 0.0], head, bad)


def _ce_of(z, W, b, t):
    """Classifier loss as a function of whichever argument is left as None."""

    def f(x):
        return tone_classifier_ce(
            x if z is None else z,
            ToneHead(x if W is None else W, x if b is None else b),
            t,
        ).value

    return f


def test_tone_classifier_gradients_match_finite_differences():
    """W, b and z gradients agree with central differences."""
    rng = np.random.default_rng(14)
    for _ in range(20):
        W = rng.normal(size=(5, 3))
        b = rng.normal(size=5)
        z = unit_rows(rng, 1, 3)[0]
        t = int(rng.integers(1, 6))
        rep = tone_classifier_ce(z, ToneHead(W, b), t)
        num_W = finite_difference(_ce_of(z, None, b, t), W.copy())
        num_b = finite_difference(_ce_of(z, W, None, t), b.copy())
        num_z = finite_difference(_ce_of(None, W, b, t), z.copy())
        assert relative_error(rep.grad("tone_head.W"), num_W) < GRAD_TOL
        assert relative_error(rep.grad("tone_head.b"), num_b) < GRAD_TOL
        assert relative_error(rep.grad("anchor"), num_z) < GRAD_TOL


# ============================================================================
# Margin variant
# ============================================================================


def test_margin_config_orders_margins():
    """m_hard must sit below m_soft."""
    with pytest.raises(ValueError, match="below"):
        MarginConfig(m_hard=0.2, m_soft=0.1)


def test_margin_loss_inactive_hinges():
    """Positives at similarity 1 and negatives far below their margins give -1."""
    anchor = [1.0, 0.0]
    rep = margin_tone_loss(anchor, [anchor, anchor], [[-1.0, 0.0]], [[-0.6, -0.8]], MarginConfig())
    assert rep.value == pytest.approx(-1.0, abs=1e-12)
    assert rep.components["hard"] == 0.0
    assert rep.components["soft"] == 0.0


def test_margin_loss_single_hard_violation():
    """A hard negative at similarity 0.4 with the other terms zeroed contributes 0.25."""
    cfg = MarginConfig(lambda_attr=0.0, lambda_soft=0.0)
    hard = [0.4, math.sqrt(1 - 0.16)]
    rep = margin_tone_loss([1.0, 0.0], [[1.0, 0.0]], [hard], [], cfg)
    assert rep.value == pytest.approx(0.25, abs=1e-12)


def test_margin_loss_empty_sets_contribute_nothing():
    """With no members at all the loss is zero and the anchor gradient vanishes."""
    rep = margin_tone_loss([1.0, 0.0], [], [], [], MarginConfig())
    assert rep.value == 0.0
    assert not rep.grad("anchor").any()


def test_margin_loss_bounded_below_and_matches_finite_differences():
    """Value is at least -lambda_attr and gradients agree with central differences."""
    rng = np.random.default_rng(15)
    cfg = MarginConfig()
    sizes = (2, 3, 3)
    for _ in range(30):
        rows = unit_rows(rng, 1 + sum(sizes), 4)

        def f(x):
            P, H, S = _split(x[1:], sizes)
            return margin_tone_loss(x[0], P, H, S, cfg).value

        P, H, S = _split(rows[1:], sizes)
        rep = margin_tone_loss(rows[0], P, H, S, cfg)
        assert rep.value >= -cfg.lambda_attr
        numeric = finite_difference(f, rows.copy())
        assert relative_error(rep.grad("anchor"), numeric[0]) < GRAD_TOL
        assert relative_error(rep.grad("hard[1]"), numeric[4]) < GRAD_TOL


# ============================================================================
# Stage-1 aggregate
# ============================================================================


def _batch(rng):
    ids = [f"e{i}" for i in range(12)]
    embeddings = dict(zip(ids, unit_rows(rng, len(ids), 6), strict=True))
    tones = {k: 1 + i % 4 for i, k in enumerate(ids)}
    batch = [
        PairSet("e0", "e1", ("e2", "e3"), ("e4",), ("e5",), ("e6",)),
        PairSet("e4", "e7", ("e8",), ("e0", "e5"), ("e6",), ()),
        PairSet("e5", None, (), ("e4",), (), ("e9", "e10")),
        PairSet("e6", "e11", ("e2", "e9"), (), ("e0",), ("e3",)),
    ]
    return batch, embeddings, tones


def test_stage1_loss_is_weighted_sum_of_components():
    """Value equals alpha * mean speaker + (1 - alpha) * mean(tone + lambda * cls)."""
    rng = np.random.default_rng(16)
    batch, emb, tones = _batch(rng)
    head = ToneHead(rng.normal(size=(4, 6)), rng.normal(size=4))
    cfg = Stage1Config()
    rep = stage1_loss(batch, emb, tones, head, cfg)

    speaker = [
        speaker_infonce(
            emb[ps.anchor],
            emb[ps.cross_gender_positive],
            [emb[k] for k in ps.contrastive_negatives],
            cfg,
        ).value
        for ps in batch
        if ps.cross_gender_positive is not None
    ]
    tone_terms = []
    for ps in batch:
        term = 0.0
        if ps.tone_positives:
            term += tone_infonce(
                emb[ps.anchor],
                [emb[k] for k in ps.tone_positives],
                [emb[k] for k in ps.hard_negatives],
                [emb[k] for k in ps.soft_negatives],
                cfg,
            ).value
        term += cfg.lambda_cls * tone_classifier_ce(emb[ps.anchor], head, tones[ps.anchor]).value
        tone_terms.append(term)
    expected = cfg.alpha * np.mean(speaker) + (1 - cfg.alpha) * np.mean(tone_terms)
    assert rep.value == pytest.approx(expected, abs=1e-12)


def test_stage1_loss_alpha_one_is_speaker_only():
    """alpha 1 reduces to the mean speaker loss."""
    rng = np.random.default_rng(17)
    batch, emb, tones = _batch(rng)
    head = ToneHead.zeros(4, 6)
    rep = stage1_loss(batch, emb, tones, head, Stage1Config(alpha=1.0))
    assert rep.value == pytest.approx(rep.components["speaker"], abs=1e-15)
    assert not rep.grad("tone_head.W").any()


def test_stage1_loss_alpha_zero_silences_speaker_gradients():
    """Ids touched only by the speaker term get exactly zero gradient."""
    rng = np.random.default_rng(18)
    batch, emb, tones = _batch(rng)
    rep = stage1_loss(batch, emb, tones, ToneHead.zeros(4, 6), Stage1Config(alpha=0.0))
    for speaker_only in ("e1", "e7", "e8", "e11", "e2"):
        assert not rep.grad(f"emb/{speaker_only}").any()


def test_stage1_loss_gradients_match_finite_differences():
    """Per-token embedding gradients agree with central differences."""
    rng = np.random.default_rng(19)
    batch, emb, tones = _batch(rng)
    head = ToneHead(rng.normal(size=(4, 6)), rng.normal(size=4))
    cfg = Stage1Config(tau_g=0.3, tau_t=0.3)
    rep = stage1_loss(batch, emb, tones, head, cfg)
    for key in ("e0", "e4", "e5", "e9"):

        def f(x, key=key):
            return stage1_loss(batch, {**emb, key: x}, tones, head, cfg).value

        numeric = finite_difference(f, emb[key].copy())
        assert relative_error(rep.grad(f"emb/{key}"), numeric) < GRAD_TOL


def test_stage1_loss_tone_terms_can_read_a_second_view():
    """Tone terms and the classifier read tone_embeddings; the speaker term keeps emb."""
    rng = np.random.default_rng(23)
    batch, emb, tones = _batch(rng)
    other = dict(zip(emb, unit_rows(rng, len(emb), 6), strict=True))
    head = ToneHead(rng.normal(size=(4, 6)), rng.normal(size=4))
    cfg = Stage1Config()

    split_rep = stage1_loss(batch, emb, tones, head, cfg, tone_embeddings=other)
    speaker_rep = stage1_loss(batch, emb, tones, head, cfg)
    tone_rep = stage1_loss(batch, other, tones, head, cfg)
    assert split_rep.components["speaker"] == pytest.approx(speaker_rep.components["speaker"])
    assert split_rep.components["tone"] == pytest.approx(tone_rep.components["tone"])
    assert split_rep.components["tone_cls"] == pytest.approx(tone_rep.components["tone_cls"])
    np.testing.assert_allclose(split_rep.grad("tone_head.W"), tone_rep.grad("tone_head.W"))
    # e10 is only a soft negative, e1 only a cross-gender positive
    assert {"tone_emb/e10", "emb/e1"} <= split_rep.grads.keys()
    assert "emb/e10" not in split_rep.grads and "tone_emb/e1" not in split_rep.grads


def test_stage1_loss_same_view_twice_splits_gradients():
    """Passing the same vectors as both views splits the gradient between the two keys."""
    rng = np.random.default_rng(24)
    batch, emb, tones = _batch(rng)
    head = ToneHead(rng.normal(size=(4, 6)), rng.normal(size=4))
    cfg = Stage1Config()
    joint = stage1_loss(batch, emb, tones, head, cfg)
    split_rep = stage1_loss(batch, emb, tones, head, cfg, tone_embeddings=emb)
    assert split_rep.value == pytest.approx(joint.value, abs=1e-12)
    for tid in emb:
        parts = [split_rep.grads.get(f"{key}/{tid}", np.zeros(6)) for key in ("emb", "tone_emb")]
        np.testing.assert_allclose(parts[0] + parts[1], joint.grads.get(f"emb/{tid}", np.zeros(6)))


def test_stage1_loss_margin_variant_gradients():
    """The margin variant's head gradient matches central differences."""
    rng = np.random.default_rng(20)
    batch, emb, tones = _batch(rng)
    head = ToneHead(rng.normal(size=(4, 6)), rng.normal(size=4))
    cfg = Stage1Config()
    rep = stage1_loss(batch, emb, tones, head, cfg, margin=MarginConfig())
    assert "margin" in rep.components

    def f(w):
        return stage1_loss(batch, emb, tones, ToneHead(w, head.b), cfg, margin=MarginConfig()).value

    numeric = finite_difference(f, head.W.copy())
    assert relative_error(rep.grad("tone_head.W"), numeric) < GRAD_TOL


def test_margin_negative_gradients_can_be_stopped():
    """Flag off: hinge gradients still reach the anchor but not H or S."""
    z, P, H, S = [1.0, 0.0], [[1.0, 0.0]], [[0.6, 0.8]], [[0.8, 0.6]]
    on = margin_tone_loss(z, P, H, S, MarginConfig())
    off = margin_tone_loss(z, P, H, S, MarginConfig(), negative_gradients=False)
    np.testing.assert_allclose(on.grad("hard[0]"), [0.5, 0.0])
    np.testing.assert_allclose(on.grad("soft[0]"), [1.0, 0.0])
    assert not off.grad("hard[0]").any()
    assert not off.grad("soft[0]").any()
    assert off.value == on.value
    np.testing.assert_array_equal(off.grad("anchor"), on.grad("anchor"))
    np.testing.assert_array_equal(off.grad("positives[0]"), on.grad("positives[0]"))


def test_stage1_margin_variant_honors_negative_gradients():
    """The margin tone term stops gradients into its negatives when asked."""
    batch = [PairSet("a", None, (), ("p",), ("h",), ("s",))]
    emb = {
        "a": np.array([1.0, 0.0]),
        "p": np.array([1.0, 0.0]),
        "h": np.array([0.6, 0.8]),
        "s": np.array([0.8, 0.6]),
    }
    tones = dict.fromkeys(emb, 1)
    head = ToneHead.zeros(2, 2)

    def run(flag):
        cfg = Stage1Config(negative_gradients=flag)
        return stage1_loss(batch, emb, tones, head, cfg, margin=MarginConfig())

    on, off = run(True), run(False)
    np.testing.assert_allclose(on.grad("emb/h"), [0.25, 0.0])
    np.testing.assert_allclose(on.grad("emb/s"), [0.5, 0.0])
    assert not off.grad("emb/h").any()
    assert not off.grad("emb/s").any()
    np.testing.assert_array_equal(off.grad("emb/a"), on.grad("emb/a"))
    assert off.value == on.value


def test_stage1_loss_empty_batch():
    """An empty batch is rejected."""
    with pytest.raises(ValueError, match="non-empty batch"):
        stage1_loss([], {}, {}, ToneHead.zeros(2, 2), Stage1Config())
