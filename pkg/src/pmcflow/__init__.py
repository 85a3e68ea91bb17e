"""Spectral simulation of the prescribed-mean-curvature conformal flow on B^3."""

__version__ = "0.1.0"
