"""Mean-field two-layer network dynamics on the sphere: simulation and diagnostics."""

__version__ = "0.1.0"
