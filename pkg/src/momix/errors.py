"""Exception types shared across the package.

Names follow the error vocabulary of the engine's contracts; every
exception derives from MomixError so callers can catch the whole family.
"""


class MomixError(Exception):
    """Base class for all engine errors."""


class BadMagic(MomixError):
    """File does not start with the expected format magic."""


class DimMismatch(MomixError):
    """Dimensions are inconsistent, invalid, or disagree with a header."""


class NonFinite(MomixError):
    """A tensor contains NaN or Inf where finite values are required."""


class BadValue(MomixError):
    """A payload or argument value is outside its legal set."""


class IoFailure(MomixError):
    """An underlying file operation failed."""


class IndexOutOfRange(MomixError):
    """A frame or timestep index is outside the valid range."""


class EmptyRegion(MomixError):
    """A pooling region contains no cells; the pair must be skipped."""


class LengthMismatch(MomixError):
    """Two sequences or vectors that must match in length do not."""


class NoValidPairs(MomixError):
    """No frame pair has a non-empty region for the requested source(s)."""


class UnknownSubject(MomixError):
    """A plan or target references a subject id that does not exist."""


class MissingBackground(MomixError):
    """An operation needs the background descriptor but none is present."""
