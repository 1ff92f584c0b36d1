"""Semi-discrete solver and verification tools for optimization problems with potentials."""

__version__ = "0.1.0"
