"""Closed-loop ASR/TTS training ("machine speech chain") on a numpy autodiff core."""

__version__ = "0.1.0"
