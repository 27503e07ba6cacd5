"""Distributed free-final-time trajectory optimization for fixed-speed swarms."""

__version__ = "0.1.0"
