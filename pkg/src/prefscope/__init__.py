"""Interpretable features of pairwise preference data."""
__version__ = "0.1.0"
