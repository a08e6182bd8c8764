"""Stochastic heat equation on the torus: simulation, ergodicity and free-energy CLT tools."""

__version__ = "0.1.0"
