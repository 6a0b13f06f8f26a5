"""Exponential-utility hedging and marginal pricing with linear temporary impact."""

from __future__ import annotations

__version__ = "0.1.0"
