"""Parallel concatenation of chunked-array container files."""

__version__ = "0.1.0"
