"""Exception and warning types shared across the package."""


class VideoEkgError(Exception):
    """Base class for all package errors."""


class ConfigError(VideoEkgError):
    """Invalid or incomplete configuration, detected at startup."""


class OverlapError(VideoEkgError):
    """An event's time span intersects an existing event of the same stream."""


class DimensionError(VideoEkgError):
    """An embedding does not match the graph-wide vector dimension."""


class UnknownId(VideoEkgError):
    """A referenced event / cluster / mention id does not exist."""


class UnknownCollection(VideoEkgError):
    """A vector collection name is not one of the known collections."""


class EmptyStream(VideoEkgError):
    """The input stream yielded no frames."""


class EmptyGraph(VideoEkgError):
    """The graph holds no events, so retrieval cannot run."""


class SizeMismatch(VideoEkgError):
    """A similarity matrix does not match the number of chunks."""


class EmptyResponse(VideoEkgError):
    """The model returned an empty completion where text was required."""


class ParseError(VideoEkgError):
    """Model output could not be parsed after the allowed reprompt."""


class SchemaVersionError(VideoEkgError):
    """The on-disk store was written by a newer schema version."""


class IntegrityError(VideoEkgError):
    """Referential integrity violated; carries the offending ids."""

    def __init__(self, message: str, offenders: list | None = None):
        super().__init__(message)
        self.offenders = offenders or []


class GatewayError(VideoEkgError):
    """A model endpoint failed after retries. ``kind`` is one of
    'timeout', 'http', 'auth', 'protocol'."""

    def __init__(self, message: str, kind: str = "http"):
        super().__init__(message)
        self.kind = kind


class MissingFrames(VideoEkgError):
    """A frame locator could not be resolved to an image."""


class IntegrityWarning(UserWarning):
    """Non-fatal referential inconsistency, e.g. a cluster linked to no event."""


class DegenerateViewWarning(UserWarning):
    """A retrieval view whose similarity mass is <= 0 was skipped."""
