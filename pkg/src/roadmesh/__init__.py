"""Authenticated vehicle-to-vehicle event sharing over a simulated ad-hoc channel."""

__version__ = "0.1.0"
