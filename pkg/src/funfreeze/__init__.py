"""Scheduled unfreezing of adapter layers, guided by Fisher-trace probes."""

__version__ = "0.1.0"
