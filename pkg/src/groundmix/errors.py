"""Exception hierarchy shared by all groundmix modules."""


class GroundMixError(Exception):
    """Base class for every error raised by this package."""


class GeometryError(GroundMixError, ValueError):
    pass


class NonPositiveDepth(GeometryError):
    pass


class RayParallelToPlane(GeometryError):
    pass


class IntersectionBehindCamera(GeometryError):
    pass


class DegenerateInput(GeometryError):
    pass


class ZeroCenter(GeometryError):
    pass


class TooFewPoints(GeometryError):
    pass


class DegenerateGeometry(GeometryError):
    pass


class NonPositiveArgument(GroundMixError, ValueError):
    pass


class DegenerateDims(GroundMixError, ValueError):
    pass


class GeometryMismatch(GroundMixError, ValueError):
    pass


class ParseError(GroundMixError, ValueError):
    """Malformed annotation or detection file.

    ``where`` carries a line number or a JSON field path when known.
    """

    def __init__(self, message, where=None):
        self.where = where
        if where is not None:
            message = f"{where}: {message}"
        super().__init__(message)


class ValidationError(GroundMixError, ValueError):
    """One or more records violate the data-model invariants."""

    def __init__(self, problems):
        self.problems = list(problems)
        text = "; ".join(self.problems[:20])
        if len(self.problems) > 20:
            text += f"; ... ({len(self.problems) - 20} more)"
        super().__init__(text)


class MissingPlane(GroundMixError, ValueError):
    pass


class PatchRejected(GroundMixError):
    pass


class RejectedIntrusion(PatchRejected):
    pass


class RejectedDegenerate(PatchRejected):
    pass


class UnknownUid(GroundMixError, KeyError):
    pass


class EmptyBank(GroundMixError):
    pass
