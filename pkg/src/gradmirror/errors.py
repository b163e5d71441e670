"""Exception hierarchy shared by every subsystem.

The CLI maps these onto its stable exit codes, so new error types should
subclass one of the three roots below rather than ``Exception`` directly.
"""


class GradMirrorError(Exception):
    """Root of all package errors."""


class ConfigError(GradMirrorError, ValueError):
    """Invalid user-supplied configuration (CLI exit code 2)."""


class InvariantError(GradMirrorError, RuntimeError):
    """A runtime invariant was violated mid-run (CLI exit code 3)."""


class UnrecoverableError(GradMirrorError, RuntimeError):
    """Recovery is impossible, e.g. a shadow replica was lost (exit code 4)."""


class ScheduleError(InvariantError, IndexError):
    pass


class ProtocolError(InvariantError):
    """A frame did not match what the receiver expected."""


class CorruptionError(ProtocolError):
    """A byte range arrived twice or a checksum failed."""


class TransportError(InvariantError):
    pass


class ControlPlaneError(InvariantError):
    pass


class ClassificationError(ProtocolError):
    pass


class NumericError(InvariantError, FloatingPointError):
    pass


class ConsistencyError(InvariantError):
    pass


class ConsolidationError(UnrecoverableError):
    pass


class ShapeError(GradMirrorError, ValueError):
    pass
