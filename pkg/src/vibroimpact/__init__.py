"""Vibro-impact simulation of flexible structures with massless-boundary reduced models."""

__version__ = "0.1.0"
