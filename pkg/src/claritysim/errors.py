"""Exception hierarchy.

Each top-level class carries the CLI exit code it maps to, so the command
line layer never needs to know about individual failure types.
"""

from __future__ import annotations


class ClaritySimError(Exception):
    exit_code = 1


class ValidationError(ClaritySimError):
    """Bad input, bad configuration or an infeasible request."""

    exit_code = 2


class RulesViolation(ClaritySimError):
    """An entry breaks one of the challenge rules."""

    exit_code = 3


class StoreIOError(ClaritySimError):
    """Missing or unreadable artefact on disk."""

    exit_code = 4


# scene generation
class InfeasibleReverberationError(ValidationError):
    pass


class InfeasibleGeometryError(ValidationError):
    pass


class SamplingFailureError(ValidationError):
    pass


class InvalidGeometryError(ValidationError):
    pass


# rendering
class NotFoundError(StoreIOError, KeyError):
    def __str__(self):
        return str(self.args[0]) if self.args else "not found"


class SilentTargetError(ValidationError):
    pass


class RenderOverflowError(ValidationError):
    pass


class InsufficientCorpusError(ValidationError):
    pass


class InvalidArgumentError(ValidationError):
    pass


# enhancement
class MalformedInputError(ValidationError):
    pass


class CannotVerifyError(ValidationError):
    pass


class DisqualifiedEntryError(RulesViolation):
    def __init__(self, message: str, measured_lookahead_ms: float | None = None):
        super().__init__(message)
        self.measured_lookahead_ms = measured_lookahead_ms


# prediction
class AlignmentFailureError(ValidationError):
    pass


class SilentReferenceError(ValidationError):
    pass


class FitFailureError(ValidationError):
    pass


# panel
class InvalidTranscriptError(ValidationError):
    pass


class IncompletePanelError(ValidationError):
    pass


# harness
class ConfigError(ValidationError):
    pass


class SchemaError(ValidationError):
    pass


class RangeError(ValidationError):
    pass


class IncompleteEntryError(ValidationError):
    def __init__(self, message: str, missing: list[str] | None = None):
        super().__init__(message)
        self.missing = list(missing or [])
