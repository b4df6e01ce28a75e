"""Collaborative-confusion sequential recommendation at desk scale."""

__version__ = "0.1.0"
