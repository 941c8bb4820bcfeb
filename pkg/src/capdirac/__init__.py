"""Resonances of 1D semiclassical Dirac operators by complex scaling and absorbing potentials."""

__version__ = "0.1.0"
