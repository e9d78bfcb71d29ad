# tests/tonebed/conftest.py
"""
Shared pytest fixtures for tonebed tests.

Small corpora and stacks keep the numeric suites fast; the default-sized
corpus is only built by tests marked slow.
"""

import os

import pytest
from hypothesis import Verbosity, settings

from tonebed.corpus import CorpusSpec, CoverageSplit, SpeakerSpec, Token, generate, split
from tonebed.ctc import vocabulary_for
from tonebed.encoder import EncoderStack, StackConfig

# =============================================================================
# Hypothesis Profiles - CI vs Local Development
# =============================================================================

# CI profile: relaxed deadlines for slower CI runners
settings.register_profile(
    "ci",
    max_examples=100,
    deadline=5000,
    verbosity=Verbosity.normal,
)

# Local dev profile: faster feedback
settings.register_profile(
    "default",
    max_examples=100,
    deadline=1000,
)

# Auto-select profile based on CI environment variable
if os.environ.get("CI"):
    settings.load_profile("ci")
else:
    settings.load_profile("default")

# =============================================================================
# Corpus Fixtures
# =============================================================================

SMALL_SPEAKERS = (
    SpeakerSpec("F1", "F", 0.45, 0.15),
    SpeakerSpec("F2", "F", 0.55, 0.25),
    SpeakerSpec("M1", "M", -0.45, -0.15),
    SpeakerSpec("M2", "M", -0.55, -0.25),
)


@pytest.fixture
def small_spec() -> CorpusSpec:
    """4 base words x 4 tones x 4 speakers = 64 tokens."""
    return CorpusSpec(n_base_words=4, n_tones=4, speakers=SMALL_SPEAKERS, seed=7)


@pytest.fixture
def small_corpus(small_spec) -> list[Token]:
    return split(generate(small_spec), CoverageSplit(seed=7))


@pytest.fixture
def small_stack_config() -> StackConfig:
    return StackConfig(M=4, D_hidden=16, feature_layer=3, freeze_bottom=1, seed=7)


@pytest.fixture
def small_stack(small_corpus, small_stack_config, small_spec) -> EncoderStack:
    return EncoderStack.initialize(
        small_stack_config,
        small_spec.feature_dim,
        vocabulary_for(small_corpus),
        small_spec.n_tones,
    )

