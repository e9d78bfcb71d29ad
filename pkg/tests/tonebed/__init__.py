# Tests for tonebed modules
