"""Gaussian-process PDE solver with spectral-mixture kernels on Kronecker grids."""

__version__ = "0.1.0"
