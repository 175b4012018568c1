"""Numerical toolkit for pseudo-differential operators on tori with a connection."""

__version__ = "0.1.0"
