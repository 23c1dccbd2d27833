"""Simulation and verification lab for the extremes of the four-dimensional membrane model."""

__version__ = "0.1.0"
