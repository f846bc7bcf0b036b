"""Implicit energy-stable solvers for Eulerian visco-elastodynamics."""

__version__ = "0.1.0"
