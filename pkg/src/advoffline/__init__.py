"""Adversarial observation attacks and smoothness defenses for offline TD3+BC."""

__version__ = "0.1.0"
