"""Replay-based continual learning with learned soft labels for the buffer."""

__version__ = "0.1.0"
