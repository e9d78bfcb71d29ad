"""Tests for evaluation.py - every metric against hand examples or enumeration oracles."""

import itertools

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from tonebed.ctc import lexicon_for, vocabulary_for
from tonebed.encoder import EncoderStack, StackConfig
from tonebed.evaluation import (
    ANALYSIS_POOLING,
    RETRIEVAL_POOLING,
    EmptyReferenceError,
    cross_gender_retrieval,
    edit_distance,
    edit_rates,
    embed_tokens,
    layer_probe,
    pair_similarity_scores,
    project_2d,
    retrieval_topk,
    similarity_experiments,
    similarity_matrix,
    tone_accuracy,
    tone_cls_accuracy,
    tone_geometry,
    tone_ranking,
    transcribe,
    unseen_speaker_retrieval,
)
from tonebed.numerics import MEAN

from .helpers.oracles import levenshtein, make_token, pair_means, unit_rows


def _six_tokens():
    """Two base words, two tones, mixed speakers and genders."""
    return [
        make_token("F1-ba1", "ba1", "ba", 1, "F1", "F"),
        make_token("M1-ba1", "ba1", "ba", 1, "M1", "M"),
        make_token("F1-ba2", "ba2", "ba", 2, "F1", "F"),
        make_token("M2-ba2", "ba2", "ba", 2, "M2", "M"),
        make_token("F2-ku1", "ku1", "ku", 1, "F2", "F"),
        make_token("M1-ku2", "ku2", "ku", 2, "M1", "M"),
    ]


def _one_hot_by_word(tokens):
    words = sorted({t.word for t in tokens})
    return np.eye(len(words))[[words.index(t.word) for t in tokens]]


# ============================================================================
# Similarity matrix and retrieval
# ============================================================================


def test_similarity_matrix_identical_rows_score_one():
    """Bit-identical rows give exactly 1 regardless of rounding."""
    rng = np.random.default_rng(0)
    x = rng.normal(size=(5, 7)) * 37.0
    sims = similarity_matrix(x, x)
    assert np.all(np.diag(sims) == 1.0)
    assert np.all(np.abs(sims) <= 1.0)


def test_retrieval_duplicate_query_is_top1():
    q = np.array([[0.6, 0.8]])
    result = retrieval_topk(q, ["a"], np.array([[1.0, 0.0], [0.6, 0.8]]), ["b", "a"])
    assert result.top1 == 1.0
    assert result.ranks == (1,)


def test_retrieval_hand_ranked():
    """Query (1, 0) ranks the nearly aligned gallery item first."""
    near = np.array([0.9, 0.1]) / np.linalg.norm([0.9, 0.1])
    result = retrieval_topk([[1.0, 0.0]], ["A"], np.stack([near, [0.0, 1.0]]), ["A", "B"])
    assert result.top1 == 1.0
    miss = retrieval_topk([[1.0, 0.0]], ["B"], np.stack([near, [0.0, 1.0]]), ["A", "B"])
    assert miss.top1 == 0.0
    assert miss.ranks == (2,)


def test_retrieval_ties_follow_gallery_order():
    """Equal similarities keep input order."""
    gallery = np.array([[1.0, 0.0], [1.0, 0.0]])
    result = retrieval_topk([[1.0, 0.0]], ["a"], gallery, ["b", "a"])
    assert result.ranks == (2,)
    assert result.top1 == 0.0 and result.top5 == 1.0


def test_retrieval_absent_word_never_hits():
    result = retrieval_topk([[1.0, 0.0]], ["z"], [[1.0, 0.0]], ["a"])
    assert result.ranks == (None,)
    assert result.top5 == 0.0


def test_retrieval_empty_gallery():
    with pytest.raises(ValueError, match="empty gallery"):
        retrieval_topk([[1.0, 0.0]], ["a"], np.zeros((0, 2)), [])


def test_retrieval_top1_bounded_by_top5_and_rotation_invariant():
    """Random galleries: top1 <= top5 and an orthogonal rotation changes no rank."""
    rng = np.random.default_rng(1)
    for _ in range(20):
        Q = unit_rows(rng, 8, 5)
        G = unit_rows(rng, 12, 5)
        qw = [f"w{i % 4}" for i in range(8)]
        gw = [f"w{i % 6}" for i in range(12)]
        base = retrieval_topk(Q, qw, G, gw)
        assert base.top1 <= base.top5
        rot, _ = np.linalg.qr(rng.normal(size=(5, 5)))
        rotated = retrieval_topk(Q @ rot, qw, G @ rot, gw)
        assert rotated.ranks == base.ranks


def test_cross_gender_retrieval_perfect_on_one_hot_words():
    """Word-pure embeddings retrieve every query at rank 1 in both directions."""
    tokens = _six_tokens()[:4]
    result = cross_gender_retrieval(tokens, _one_hot_by_word(tokens))
    assert result.f_to_m.direction == "F→M"
    assert result.avg_top1 == 1.0
    assert result.avg_top5 == 1.0


def test_unseen_speaker_retrieval_uses_training_gallery():
    """The held-out speaker is queried against opposite-gender training tokens only."""
    tokens = [
        make_token("F9-ba1", "ba1", "ba", 1, "F9", "F", split="test"),
        make_token("M1-ba1", "ba1", "ba", 1, "M1", "M", split="train"),
        make_token("M2-ba1", "ba1", "ba", 1, "M2", "M", split="test"),
        make_token("M1-ku1", "ku1", "ku", 1, "M1", "M", split="train"),
    ]
    Z = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 0.0], [0.8, 0.6]])
    result = unseen_speaker_retrieval(tokens, Z, "F9")
    assert result.direction == "F9→M"
    assert result.ranks == (2,)


# ============================================================================
# Tone geometry
# ============================================================================


def test_tone_geometry_total_collapse():
    """Identical embeddings give PosSim 1 and zero distances."""
    tokens = _six_tokens()
    geo = tone_geometry(tokens, np.tile([0.3, 0.4, 0.5], (6, 1)))
    assert geo.pos_sim.mean == 1.0
    assert geo.hard_neg_dist.mean == 0.0
    assert geo.soft_neg_dist.mean == 0.0


def test_tone_geometry_one_hot_words():
    """Orthogonal word embeddings put every negative at distance exactly 1."""
    tokens = _six_tokens()
    geo = tone_geometry(tokens, _one_hot_by_word(tokens))
    assert geo.soft_neg_dist.mean == 1.0
    assert geo.hard_neg_dist.mean == 1.0
    assert geo.pos_sim.mean == 1.0


def test_tone_geometry_matches_pair_enumeration():
    """Overall statistics equal explicit upper-triangle enumeration."""
    tokens = _six_tokens()
    Z = unit_rows(np.random.default_rng(2), 6, 4)
    geo = tone_geometry(tokens, Z)
    pos = pair_means(tokens, Z, lambda a, b: a.word == b.word)
    hard = pair_means(tokens, Z, lambda a, b: a.base_word == b.base_word and a.word != b.word)
    soft = pair_means(tokens, Z, lambda a, b: a.base_word != b.base_word)
    assert geo.pos_sim.mean == pytest.approx(pos, abs=1e-12)
    assert geo.hard_neg_dist.mean == pytest.approx(1.0 - hard, abs=1e-12)
    assert geo.soft_neg_dist.mean == pytest.approx(1.0 - soft, abs=1e-12)
    assert (geo.pos_sim.n, geo.hard_neg_dist.n, geo.soft_neg_dist.n) == (2, 5, 8)


def test_tone_geometry_per_tone_conditions_on_anchor():
    """The per-tone table uses ordered pairs whose anchor carries the tone."""
    tokens = _six_tokens()
    Z = unit_rows(np.random.default_rng(3), 6, 4)
    geo = tone_geometry(tokens, Z)
    assert sorted(geo.per_tone) == [1, 2]
    expected = [
        1.0 - float(Z[i] @ Z[j])
        for i, j in itertools.permutations(range(6), 2)
        if tokens[i].tone == 1 and tokens[i].base_word != tokens[j].base_word
    ]
    assert geo.per_tone[1].soft_neg_dist.mean == pytest.approx(np.mean(expected), abs=1e-12)


def test_tone_geometry_empty_class_is_absent():
    """No same-word pairs means PosSim is reported as None, not zero."""
    tokens = [
        make_token("F1-ba1", "ba1", "ba", 1, "F1", "F"),
        make_token("M1-ba2", "ba2", "ba", 2, "M1", "M"),
        make_token("F1-ku1", "ku1", "ku", 1, "F1", "F"),
    ]
    geo = tone_geometry(tokens, unit_rows(np.random.default_rng(4), 3, 3), per_tone=False)
    assert geo.pos_sim is None
    assert geo.hard_neg_dist is not None
    assert geo.per_tone is None


# ============================================================================
# Edit rates and transcription
# ============================================================================


def test_single_character_substitution():
    """liam against liab is one substitution in four characters."""
    score = edit_rates(["liam"], ["liab"])
    assert score.cer == 0.25
    assert score.wer == 1.0
    assert score.char_edits.substitutions == 1


def test_word_deletion():
    """Hypothesis a c against reference a b c drops one of three words."""
    score = edit_rates(["a c"], ["a b c"])
    assert score.wer == pytest.approx(1 / 3)
    assert score.word_edits.deletions == 1
    assert score.wer == score.word_edits.total / score.n_words


def test_empty_references_rejected():
    with pytest.raises(EmptyReferenceError, match="empty reference set"):
        edit_rates([""], [""])


def test_mismatched_counts_rejected():
    with pytest.raises(ValueError, match="differ in count"):
        edit_rates(["a"], ["a", "b"])


words = st.text(alphabet="abc", max_size=6)


@given(words, words)
def test_edit_distance_matches_levenshtein(a, b):
    """Backtraced counts total the plain DP distance."""
    assert edit_distance(list(a), list(b)).total == levenshtein(a, b)


@given(words, words, words)
def test_edit_distance_triangle_inequality(a, b, c):
    ab = edit_distance(list(a), list(b)).total
    bc = edit_distance(list(b), list(c)).total
    ac = edit_distance(list(a), list(c)).total
    assert ac <= ab + bc


def test_transcribe_with_lexicon_stays_in_lexicon(small_corpus, small_stack):
    """Lexicon-constrained decoding only emits lexicon words or nothing."""
    lexicon = lexicon_for(small_corpus)
    test = [t for t in small_corpus if t.split == "test"][:6]
    hyps = transcribe(small_stack, test, decoder="beam", lexicon=lexicon, beam_width=4)
    assert len(hyps) == len(test)
    assert all(h in lexicon or h == "" for h in hyps)
    greedy = transcribe(small_stack, test, decoder="greedy")
    assert all(set(h) <= set(small_stack.vocabulary.symbols) for h in greedy)


# ============================================================================
# Similarity experiments
# ============================================================================


def test_pair_similarity_scores_match_oracle():
    """E1 and E4 equal enumeration; E3 averages wrong-base permutation pairs."""
    tokens = _six_tokens()
    Z = unit_rows(np.random.default_rng(5), 6, 4)
    scores = pair_similarity_scores(tokens, Z, seed=0)
    e1 = pair_means(tokens, Z, lambda a, b: a.word == b.word and a.speaker_id != b.speaker_id)
    e4 = pair_means(tokens, Z, lambda a, b: a.base_word == b.base_word and a.word != b.word)
    assert scores.e1 == pytest.approx(e1, abs=1e-12)
    assert scores.e4 == pytest.approx(e4, abs=1e-12)
    assert scores.e2 is None
    assert scores.e3 is None or -1.0 <= scores.e3 <= 1.0


def test_zero_pitch_shift_scores_one(small_corpus, small_stack):
    """A zero shift reproduces the embeddings, so E2 is exactly 1."""
    test = [t for t in small_corpus if t.split == "test"]
    scores = similarity_experiments(test, small_stack, shifts=(0.0,))
    assert scores.e2 == 1.0
    assert scores.e2_by_shift == {0.0: 1.0}


def test_similarity_experiments_are_seeded(small_corpus, small_stack):
    test = [t for t in small_corpus if t.split == "test"]
    a = similarity_experiments(test, small_stack, shifts=(1.0,), seed=3)
    b = similarity_experiments(test, small_stack, shifts=(1.0,), seed=3)
    assert a == b


# ============================================================================
# Layer probe and tone classification
# ============================================================================


def test_layer_probe_identity_stack_rows_agree(small_corpus, small_spec):
    """With identity blocks every layer yields the same probe values."""
    cfg = StackConfig(M=3, D_hidden=16, feature_layer=2, freeze_bottom=1, init="identity")
    stack = EncoderStack.initialize(cfg, small_spec.feature_dim, vocabulary_for(small_corpus), 4)
    test = [t for t in small_corpus if t.split == "test"]
    rows = layer_probe(test, stack)
    assert [r.layer for r in rows] == [1, 2, 3]
    assert len({(r.avg_top1, r.hard_neg_dist) for r in rows}) == 1


def test_layer_probe_matches_retrieval_and_geometry_per_layer(small_corpus, small_stack):
    """Each probe row equals the retrieval and tone-geometry figures at that layer."""
    test = [t for t in small_corpus if t.split == "test"]
    rows = layer_probe(test, small_stack)
    assert [r.layer for r in rows] == list(range(1, small_stack.config.M + 1))
    for row in rows:
        Zr = embed_tokens(small_stack, test, row.layer, RETRIEVAL_POOLING)
        Za = embed_tokens(small_stack, test, row.layer, ANALYSIS_POOLING)
        geometry = tone_geometry(test, Za, per_tone=False)
        assert geometry.hard_neg_dist is not None
        assert row.avg_top1 == cross_gender_retrieval(test, Zr).avg_top1
        assert row.hard_neg_dist == geometry.hard_neg_dist.mean


def test_tone_ranking_breaks_ties_to_lower_tone():
    np.testing.assert_array_equal(tone_ranking([0.0, 2.0, 0.0, 2.0]), [2, 4, 1, 3])


def test_tone_accuracy_of_zero_logits():
    """Uniform logits rank tones 1..T in order: top3 is 3/T on a balanced set."""
    acc = tone_accuracy(np.zeros((8, 4)), [1, 2, 3, 4] * 2)
    assert acc.top1 == 0.25
    assert acc.top3 == 0.75
    assert acc.per_tone == {1: 1.0, 2: 0.0, 3: 0.0, 4: 0.0}


def test_tone_cls_accuracy_with_fresh_head(small_corpus, small_stack):
    """The untrained zero head predicts tone 1 everywhere."""
    test = [t for t in small_corpus if t.split == "test"]
    acc = tone_cls_accuracy(test, small_stack)
    assert acc.n == len(test)
    assert acc.top1 == pytest.approx(sum(t.tone == 1 for t in test) / len(test))


# ============================================================================
# 2-D projection
# ============================================================================


def test_projection_matches_eigendecomposition():
    """Explained variances and coordinates agree with a dense eigensolver."""
    rng = np.random.default_rng(6)
    X = rng.normal(size=(40, 5)) * np.array([5.0, 3.0, 1.0, 0.5, 0.2])
    proj = project_2d(X)
    Xc = X - X.mean(axis=0)
    evals, evecs = np.linalg.eigh(Xc.T @ Xc / X.shape[0])
    assert proj.explained_variance[0] == pytest.approx(evals[-1], rel=1e-8)
    assert proj.explained_variance[1] == pytest.approx(evals[-2], rel=1e-8)
    coords = np.array(proj.coords)
    np.testing.assert_allclose(np.abs(coords[:, 0]), np.abs(Xc @ evecs[:, -1]), atol=1e-6)
    np.testing.assert_allclose(np.abs(coords[:, 1]), np.abs(Xc @ evecs[:, -2]), atol=1e-6)
    assert not proj.rank_deficient


def test_projection_of_collinear_points_is_rank_deficient():
    """Points on a line get a zeroed second axis."""
    t = np.linspace(-1.0, 1.0, 7)
    X = np.outer(t, [1.0, 2.0, -1.0])
    proj = project_2d(X)
    assert proj.rank_deficient
    assert all(y == 0.0 for _, y in proj.coords)
    assert proj.explained_variance[1] == 0.0


def test_projection_is_seeded_and_needs_three_points():
    X = np.random.default_rng(7).normal(size=(10, 4))
    assert project_2d(X, seed=1) == project_2d(X, seed=1)
    with pytest.raises(ValueError, match="at least 3"):
        project_2d(X[:2])


def test_embed_tokens_rows_are_unit(small_corpus, small_stack):
    Z = embed_tokens(small_stack, small_corpus[:5], 2, MEAN)
    np.testing.assert_allclose(np.linalg.norm(Z, axis=1), 1.0, atol=1e-12)
