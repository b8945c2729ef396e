"""crashlab: crash-pattern analysis for a single rural highway corridor."""

__version__ = "0.1.0"
