"""Numerical laboratory for matrix trace dynamics, its canonical ensemble and
stochastic collapse dynamics."""

__version__ = "0.1.0"
