"""Spiking feature-pyramid detection on event-camera streams."""

__version__ = "0.1.0"
