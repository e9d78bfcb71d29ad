"""tonebed - speaker-invariant, tone-aware word embeddings."""

from importlib.metadata import PackageNotFoundError, version

try:
    __version__ = version("tonebed")
except PackageNotFoundError:
    # Running from source without install
    __version__ = "0.0.0+dev"
