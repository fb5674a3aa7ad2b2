"""Trace-driven simulation of an online evolutionary batch-size scheduler for GPU clusters."""

__version__ = "0.1.0"
