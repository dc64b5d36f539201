"""Collective decay of qubit chains coupled to a one-dimensional waveguide."""
__version__ = "0.1.0"
