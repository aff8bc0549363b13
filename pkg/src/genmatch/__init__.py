"""Generative-matching retrieval engine for multilingual reply suggestion."""

__version__ = "0.1.0"
