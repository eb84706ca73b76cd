"""Exception types shared across the engine.

Validation failures (bad files, bad shapes, bad config) and numerical
failures (non-finite data) are kept distinct so the CLI can map them to
different exit codes.
"""


class StitchSegError(Exception):
    """Base class for all engine errors."""


class ValidationError(StitchSegError, ValueError):
    """Input, manifest, or configuration violates a declared invariant."""


class TensorFormatError(ValidationError):
    """A tensor container file is malformed."""


class NumericalError(StitchSegError, ArithmeticError):
    """Non-finite or degenerate numerical state was encountered."""
