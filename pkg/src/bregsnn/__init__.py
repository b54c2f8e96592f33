"""Sparse training of spiking networks with linearized Bregman iterations."""

__version__ = "0.1.0"
