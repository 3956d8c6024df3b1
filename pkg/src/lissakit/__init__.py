"""Influence-function toolkit: stochastic iHVP solvers, curvature spectrum
estimation, and desk-scale oracles for validating the whole pipeline."""

__version__ = "0.1.0"
