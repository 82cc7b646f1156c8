"""Adaptive Benders decomposition with bounded SDDP for multistage recourse."""

__version__ = "0.1.0"
