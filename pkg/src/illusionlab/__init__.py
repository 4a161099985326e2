"""Desk-scale adversarial illusion / disillusion laboratory."""

__version__ = "0.1.0"
