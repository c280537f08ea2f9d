"""Desk-scale numerical laboratory for probe-type obstacle detection
from boundary Dirichlet-to-Neumann data of a stationary Schroedinger
operator on a box."""

__version__ = "0.1.0"
