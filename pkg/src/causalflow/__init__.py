"""Conditional-density treatment-effect estimation with normalizing flows."""

__version__ = "0.1.0"
