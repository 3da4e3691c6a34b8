"""Membership inference attacks against knowledge graph embedding models."""

__version__ = "0.1.0"
