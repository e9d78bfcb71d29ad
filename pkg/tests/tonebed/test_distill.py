"""Tests for distill.py - softened posteriors, frame-wise KL and the Stage-2 mix."""

import math

import numpy as np
import pytest

from tonebed.distill import NO_KD, KdConfig, TeacherCache, kd_loss, soften, stage2_loss
from tonebed.losses import LossReport

from .helpers.oracles import finite_difference, relative_error


def test_soften_two_logit_frame():
    """(0, ln 9) at temperature 1 gives (0.1, 0.9)."""
    p = np.exp(soften([[0.0, math.log(9.0)]], 1.0))
    np.testing.assert_allclose(p, [[0.1, 0.9]], atol=1e-15)


def test_soften_rows_are_distributions():
    """Rows sum to one for any temperature."""
    rng = np.random.default_rng(0)
    for tau in (0.5, 1.0, 3.0, 50.0):
        p = np.exp(soften(rng.normal(scale=5.0, size=(6, 4)), tau))
        np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-10)


def test_soften_high_temperature_flattens():
    """At tau 1e6 bounded logits become nearly uniform."""
    p = np.exp(soften([[-3.0, 0.0, 3.0]], 1e6))
    assert p.max() - p.min() < 1e-5


def test_soften_rejects_non_positive_temperature():
    with pytest.raises(ValueError, match="positive"):
        soften([[0.0, 1.0]], 0.0)


def test_kd_identical_logits_is_zero():
    """KL of a distribution with itself vanishes."""
    rng = np.random.default_rng(1)
    logits = rng.normal(size=(5, 4))
    assert kd_loss(logits, logits, KdConfig()).value == pytest.approx(0.0, abs=1e-12)


def test_kd_hand_computed_value():
    """Teacher (0, ln 9) against a uniform student at temperature 1."""
    rep = kd_loss([[0.0, math.log(9.0)]], [[0.0, 0.0]], KdConfig(tau_kd=1.0))
    expected = 0.1 * math.log(0.1 / 0.5) + 0.9 * math.log(0.9 / 0.5)
    assert rep.value == pytest.approx(expected, abs=1e-12)
    assert rep.value == pytest.approx(0.368064207, abs=1e-9)


def test_kd_is_non_negative():
    """KL(teacher || student) >= 0 over random pairs."""
    rng = np.random.default_rng(2)
    for _ in range(1000):
        t = rng.normal(scale=3.0, size=(3, 4))
        s = rng.normal(scale=3.0, size=(3, 4))
        assert kd_loss(t, s, KdConfig()).value >= -1e-15


def test_kd_gradient_is_student_only_and_matches_finite_differences():
    """Only the student logits receive a gradient, matching central differences."""
    rng = np.random.default_rng(3)
    cfg = KdConfig()
    for _ in range(20):
        t = rng.normal(size=(4, 5))
        s = rng.normal(size=(4, 5))
        rep = kd_loss(t, s, cfg)
        assert set(rep.grads) == {"student_logits"}
        numeric = finite_difference(lambda x, t=t: kd_loss(t, x, cfg).value, s.copy())
        assert relative_error(rep.grad("student_logits"), numeric) < 1e-4


def test_kd_shape_mismatch():
    with pytest.raises(ValueError, match="shape mismatch"):
        kd_loss(np.zeros((2, 3)), np.zeros((3, 3)), KdConfig())


def test_stage2_mix_values():
    """delta 0.7 with CTC 2 and KD 1 gives 1.7; delta 1 is pure CTC."""
    ctc = LossReport(2.0, {"logits": np.array([1.0, -1.0])})
    kd = LossReport(1.0, {"logits": np.array([0.5, 0.5])})
    rep = stage2_loss(ctc, kd, KdConfig(delta=0.7))
    assert rep.value == pytest.approx(1.7, abs=1e-12)
    np.testing.assert_allclose(rep.grad("logits"), [0.85, -0.55], atol=1e-12)
    assert stage2_loss(ctc, None, NO_KD).value == 2.0


def test_stage2_is_linear_in_components():
    """Scaling both components by c scales the value by c."""
    cfg = KdConfig(delta=0.5)
    base = stage2_loss(LossReport(3.0, {}), LossReport(1.0, {}), cfg).value
    scaled = stage2_loss(LossReport(6.0, {}), LossReport(2.0, {}), cfg).value
    assert scaled == 2 * base


def test_stage2_requires_kd_when_delta_below_one():
    with pytest.raises(ValueError, match="KD component required"):
        stage2_loss(LossReport(1.0, {}), None, KdConfig(delta=0.7))


def test_kd_config_flags():
    """delta 1 means the teacher is never consulted."""
    assert not NO_KD.uses_teacher
    assert KdConfig().uses_teacher


def test_teacher_cache_round_trip(tmp_path):
    """Cached logits reload at float32 precision; missing ids raise."""
    cache = TeacherCache(tmp_path / "teacher_cache")
    assert not cache.exists()
    logits = np.array([[0.25, -1.5, 3.0]])
    cache.save("F1-ba1", logits)
    assert cache.exists()
    assert "F1-ba1" in cache
    np.testing.assert_array_equal(cache.load("F1-ba1"), logits)
    with pytest.raises(FileNotFoundError):
        cache.load("M1-ba1")
