"""Reversed-gradient susceptibility artifact correction for EPI-MRI."""

__version__ = "0.1.0"
