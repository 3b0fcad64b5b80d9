"""Desk-scale quantum-classical AFQMC with matchgate classical shadows."""

__version__ = "0.1.0"
