"""Exception types shared across the package."""


class ParameterError(ValueError):
    """An argument value violates a documented precondition."""


class ShapeError(ValueError):
    """An array argument has incompatible dimensions."""


class FormatError(ValueError):
    """A file or record does not match its expected schema."""


class DependencyError(RuntimeError):
    """A required upstream artifact (checkpoint, index) is missing or mismatched."""


class NotFoundError(LookupError):
    """A requested identifier does not exist."""
