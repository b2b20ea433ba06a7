"""Desk-scale lab for differential-OFDM detection over simulated underwater acoustic channels."""

__version__ = "0.1.0"
