"""Desk-scale digital twin of an optical line system and the recovery
workflow that borrows it after a disaster."""

__version__ = "0.1.0"
