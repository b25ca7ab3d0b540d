"""SR workbench: desk-scale super-resolution experiments."""

__version__ = "0.1.0"
