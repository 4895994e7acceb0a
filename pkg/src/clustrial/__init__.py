"""Center-aware AIPW estimation for multi-center randomized trials."""

__version__ = "0.1.0"
