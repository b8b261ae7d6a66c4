"""Replaced-token-detection pretraining that replays generated examples from a prioritized buffer."""

__version__ = "0.1.0"
