"""Windowed end-to-end neural diarization with vector clustering."""

__version__ = "0.1.0"
