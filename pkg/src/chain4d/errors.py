"""Exception hierarchy shared across the package.

Two failure families matter to callers: input that violates a contract
(ValidationError, CLI exit code 1) and numerically unsalvageable
situations discovered mid-computation (NumericalError, CLI exit code 2).
"""


class ValidationError(ValueError):
    """Input rejected before any real computation ran."""


class NumericalError(RuntimeError):
    """Computation started but reached a numerically hopeless state."""


class DegenerateGeometryError(NumericalError):
    """Geometric configuration without a well-posed answer (collinear PnP
    sample, empty intersection, unreachable mesh component)."""


class PnPFailureError(NumericalError):
    """Robust pose estimation found no acceptable model."""
