"""Reference server for the /v1 backend wire protocol."""

__version__ = "0.1.0"
