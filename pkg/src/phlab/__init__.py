"""Numerical laboratory for partially hyperbolic endomorphisms of the 2-torus."""

__version__ = "0.1.0"
