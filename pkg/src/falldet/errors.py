"""Error taxonomy shared across the package.

Every raised error carries enough context to identify the failing input
(field name, line number, offset, slot id) without a debugger.
"""


class FalldetError(Exception):
    """Base class for all package errors."""


class ConfigError(FalldetError):
    """Invalid or inconsistent configuration (policy, modulus, peer table)."""


class MalformedInputError(FalldetError):
    """Structurally invalid caller input (bad share set, bad CSV row)."""


class InsufficientSharesError(MalformedInputError):
    """Fewer than reconstruct_count distinct shares were supplied."""


class FrameError(FalldetError):
    """Wire frame or envelope failed to parse or validate."""


class TransportError(FalldetError):
    """Connection, timeout, or delivery failure."""


class ProtocolError(FalldetError):
    """MPC protocol violation: range overflow, schedule drift, bad round."""


class PolicyError(ProtocolError):
    """An operation was refused by the opening policy (production mode)."""


class IngestError(FalldetError):
    """Sensor CSV could not be ingested; message names the line number."""


class ModelLoadError(FalldetError):
    """Model file rejected; message names the offending field."""
