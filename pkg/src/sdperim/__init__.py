"""Software-defined perimeter suite."""

__version__ = "0.1.0"
