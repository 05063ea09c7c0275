"""Continual test-time adaptation with Fourier and statistic-level style bridging, on numpy."""

__version__ = "0.1.0"
