"""Presentation helpers for tfi-util."""

from .view_model import SweepResultsViewModel

__all__ = ["SweepResultsViewModel"]
