"""Toolkit for photorealism-enhancement pipelines and sim2real gap metrics."""

__version__ = "0.1.0"

SCHEMA_VERSION = "1"
