"""Self-supervised pretext tasks and evaluation tooling for document images."""

__version__ = "0.1.0"
