"""Donor-recipient compatibility estimation with matching representations."""

__version__ = "0.1.0"
