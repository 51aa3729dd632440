"""Gloss-free sign language translation over precomputed video features."""

__version__ = "0.1.0"
