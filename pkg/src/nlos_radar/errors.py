"""Exception types raised across the package."""


class NlosRadarError(Exception):
    """Base class for all package errors."""


class ScenarioError(NlosRadarError, ValueError):
    """Malformed or inconsistent scenario description.

    ``field`` is a dotted path into the configuration document and ``line``
    the 1-based source line when the scenario came from a file.
    """

    def __init__(self, message, field=None, line=None):
        self.field = field
        self.line = line
        where = []
        if field is not None:
            where.append(f"field '{field}'")
        if line is not None:
            where.append(f"line {line}")
        if where:
            message = f"{message} ({', '.join(where)})"
        super().__init__(message)

    def to_record(self):
        return {"error": type(self).__name__, "message": str(self),
                "field": self.field, "line": self.line}


class ShapeMismatchError(NlosRadarError, ValueError):
    """Array dimensions disagree with the sensor configuration."""


class NoIntersectionError(NlosRadarError, ValueError):
    """A ray is parallel to a wall line and never meets it."""


class UnreliableVelocityError(NlosRadarError, ValueError):
    """Line of sight is nearly perpendicular to the wall direction."""


class AmbiguousHalfPlaneError(NlosRadarError, ValueError):
    """Virtual detection lies exactly on the wall normal through the sensor."""


class MissingInputError(NlosRadarError, FileNotFoundError):
    """A pipeline stage could not find the files of a previous stage."""
