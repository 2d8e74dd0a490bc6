"""Trajectory-predictive, diffusion-guided control of multi-RIS uplinks."""

__version__ = "0.1.0"
