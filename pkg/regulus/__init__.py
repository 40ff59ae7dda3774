"""Accountable multi-agent collaboration: ledger, arbitration, reputation and forecasting."""

from .cli import main

__version__ = "0.1.0"

__all__ = ["main", "__version__"]
