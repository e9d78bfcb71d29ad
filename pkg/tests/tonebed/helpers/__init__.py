# Shared oracles and builders for tonebed tests
