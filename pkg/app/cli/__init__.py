"""Command-line front end (``srwb``) for the super-resolution workbench."""

from .main import build_parser, main

__all__ = ["build_parser", "main"]
