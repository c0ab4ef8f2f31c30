"""Simulation testbed for detector-aware profile selection."""

__version__ = "0.1.0"
