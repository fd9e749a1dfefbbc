"""Post-hoc scoring and evaluation for selective classification with OOD data."""

__version__ = "0.1.0"
