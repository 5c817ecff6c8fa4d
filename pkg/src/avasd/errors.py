"""Exception taxonomy shared by every avasd module.

All errors raised on purpose derive from AvasdError so callers (service,
CLI) can map them to exit codes / HTTP responses without string matching.
"""


class AvasdError(Exception):
    """Base class for all structured avasd errors."""


class ShapeError(AvasdError):
    """An array has the wrong shape; message names the offending dimension."""


class ConfigError(AvasdError):
    """Invalid configuration or argument value (usage-level mistake)."""


class DataFormatError(AvasdError):
    """A file (WAV, tensor blob, checkpoint, manifest) is malformed."""


class NumericError(AvasdError):
    """A numeric failure: non-finite gradient/loss, zero variance, etc."""
