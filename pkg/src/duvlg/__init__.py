"""Desk-scale dual sequence-to-sequence vision-and-language generation stack."""

__version__ = "0.1.0"
