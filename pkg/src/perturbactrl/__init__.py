"""Numerical controllability laboratory for perturbed and coupled 1D PDE systems."""

__version__ = "0.1.0"
