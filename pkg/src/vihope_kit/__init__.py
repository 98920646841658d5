"""Visuotactile in-hand shape completion and 6D pose estimation toolkit."""

__version__ = "0.1.0"
