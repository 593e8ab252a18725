"""Verifier-guided exploration over imagined egocentric views for spatial QA."""

__version__ = "0.1.0"
