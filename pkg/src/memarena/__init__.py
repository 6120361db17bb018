"""Desk-scale memory-dependent manipulation workbench."""

__version__ = "0.1.0"
