"""Instrumental-variable estimation of the early-treatment effect in screening trials."""

__version__ = "0.1.0"
