"""Identification of price-responsive flexible-load aggregates."""

__version__ = "0.1.0"
