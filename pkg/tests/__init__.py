# Test suite for tonebed package
