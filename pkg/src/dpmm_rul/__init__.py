"""Failure-mode discovery with a Dirichlet-process mixture coupled to neural RUL prediction."""

__version__ = "0.1.0"
