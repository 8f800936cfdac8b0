"""Multi-scale, multi-cloud point classification toolkit."""

__version__ = "0.1.0"
