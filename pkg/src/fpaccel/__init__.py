"""Batched differentiable conic fixed-point solver with learned acceleration."""

__version__ = "0.1.0"
