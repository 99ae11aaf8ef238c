"""Capacity planning and robust beamforming for a sojourner sub-cell."""

__version__ = "0.1.0"
