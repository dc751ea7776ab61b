"""Differentiable Gaussian splatting with uncertainty-guided optimal-transport depth supervision."""

__version__ = "0.1.0"
