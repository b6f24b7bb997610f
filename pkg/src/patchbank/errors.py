"""Exception types shared across the package."""


class PatchbankError(Exception):
    """Base class for all errors raised by this package."""


class InvalidInputError(PatchbankError, ValueError):
    """An argument violates a documented precondition."""


class EmptyInputError(PatchbankError, ValueError):
    """An operation received no usable data (e.g. every cell excluded)."""


class DegenerateInputError(PatchbankError, ValueError):
    """Input is structurally valid but carries no usable signal."""


class FormatError(PatchbankError, ValueError):
    """A binary file does not conform to its declared layout."""


class UndefinedMetricError(PatchbankError, ValueError):
    """A metric is mathematically undefined for the given inputs."""
