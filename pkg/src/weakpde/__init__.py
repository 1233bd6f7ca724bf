"""Mesh-free weak-form neural solver for advection-diffusion transport."""

__version__ = "0.1.0"
