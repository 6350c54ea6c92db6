"""Utility functions."""

from psgel.utils.config import ExperimentConfig
from psgel.utils.logging_setup import setup_logging
from psgel.utils.report import summarize, write_report

__all__ = [
    "ExperimentConfig",
    "setup_logging",
    "summarize",
    "write_report",
]
