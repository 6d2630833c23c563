"""Multiscale continuous Galerkin solver for 2D Helmholtz problems on lattices."""

__version__ = "0.1.0"
