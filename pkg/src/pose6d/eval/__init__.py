"""Metrics, experiments and reports."""
