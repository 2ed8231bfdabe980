"""Simulated hearing-aid challenge: scenes, listeners, baselines, panel and scoring."""

__version__ = "0.1.0"
