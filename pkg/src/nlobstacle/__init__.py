"""Obstacle problems for fractional and classical minimal surfaces on uniform grids."""

__version__ = "0.1.0"
