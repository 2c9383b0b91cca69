"""Packaged data files (prompt templates)."""
