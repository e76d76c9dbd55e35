"""Spectral laboratory for stochastic Q-curvature flows on flat tori."""
from .spectral import FieldCoeffs, TorusGeometry

__all__ = ["FieldCoeffs", "TorusGeometry"]
