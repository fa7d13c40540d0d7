"""Data pipeline, experiments and CLI."""
