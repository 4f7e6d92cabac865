"""Outage forecasting from QoS metric distributions."""

__version__ = "0.1.0"
