"""Harmonic coordinates on near-round Riemannian 3-balls, with identity checks."""

__version__ = "0.1.0"
