"""Desk-scale target speaker extraction with speaker-consistency training."""

__version__ = "0.1.0"
