"""Semi-supervised RF fingerprinting toolkit."""

__version__ = "0.1.0"
