"""Data selection for M-estimation: asymptotic theory, high-dimensional saddle
points, and simulation."""

__version__ = "0.1.0"
