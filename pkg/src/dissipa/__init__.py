"""Dissipativity analysis of nonlinear input-affine systems with piecewise-affine storage functions."""
from __future__ import annotations

__version__ = "0.1.0"
