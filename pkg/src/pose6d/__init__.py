"""Pose regression from synthetic turntable data."""

__version__ = "0.1.0"
