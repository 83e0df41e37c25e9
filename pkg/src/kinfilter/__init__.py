"""Numerical filtering toolkit for partially observed kinetic diffusions."""

__version__ = "0.1.0"
