"""Package-wide error types mapped to CLI exit codes by the harness."""
from __future__ import annotations


class ConfigError(ValueError):
    """Invalid experiment configuration; the message names the field path."""


class NumericError(RuntimeError):
    """Non-finite value during optimization; carries the step index."""

    def __init__(self, message: str, step: int | None = None):
        super().__init__(message if step is None else f"step {step}: {message}")
        self.step = step


class BridgeTimeout(RuntimeError):
    """A remote eps request exceeded its deadline; safe to retry."""


class BridgeProtocolError(RuntimeError):
    """The remote side violated the wire protocol (ids, shapes, framing)."""


class BridgeServerError(RuntimeError):
    """The server answered with an error line; the message is verbatim."""
