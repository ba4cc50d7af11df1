"""Sector-discretized GT endurance race simulator with pit-strategy learners."""

__version__ = "0.1.0"
