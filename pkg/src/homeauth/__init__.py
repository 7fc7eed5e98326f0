"""Behavioral user authentication from smart-home IoT traffic metadata."""

__version__ = "0.1.0"


class DataError(ValueError):
    """Malformed or inconsistent input data (CLI exit code 2)."""
