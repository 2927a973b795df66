"""Sandboxed interpreter worker: one serial executor per process."""

__version__ = "0.1.0"

from .worker import PROTOCOL_VERSION, execute, serve  # noqa: F401
