"""Parallel SUPER low-dose CT reconstruction at desk scale."""

__version__ = "0.1.0"
