"""Desk-scale multi-modal document encoder: text + layout + vision."""

__version__ = "0.1.0"
