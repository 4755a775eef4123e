"""Interpreters producing per-token attribution maps."""
