"""Structure-preserving nonintrusive reduced-order models for Lagrangian mechanical systems."""

__version__ = "0.1.0"
