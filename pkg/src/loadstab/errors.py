"""Exception hierarchy for the toolkit."""


class LoadstabError(Exception):
    """Base class for all toolkit errors."""


class ConfigError(LoadstabError):
    """Scenario configuration is malformed or inconsistent."""


class InvalidParameterError(LoadstabError):
    """A physical parameter violates its validity range."""


class DimensionError(LoadstabError):
    """Vector/matrix dimensions do not match the model contract."""


class SingularLoadError(LoadstabError):
    """Load evaluation hit a singular point (e.g. CPL at zero voltage)."""


class InvalidSplitError(InvalidParameterError):
    """ZIP share parameter leaves no power for the resistive branch."""


class NoEquilibriumError(LoadstabError):
    """Equilibrium solve failed to converge (load beyond the P-V nose).

    Carries the last Newton residual norm for diagnostics.
    """

    def __init__(self, message, residual_norm=None):
        super().__init__(message)
        self.residual_norm = residual_norm


class SingularAlgebraError(LoadstabError):
    """det(g_y) fell below the singularity threshold; reduction impossible."""

    def __init__(self, message, det_gy=None):
        super().__init__(message)
        self.det_gy = det_gy


class ModelInvalidError(LoadstabError):
    """A trajectory or probe left the model's physical region.

    Carries the label of the offending state when known.
    """

    def __init__(self, message, label=None):
        super().__init__(message)
        self.label = label


class LinearizationError(LoadstabError):
    """Non-finite residual encountered while probing a Jacobian."""

    def __init__(self, message, label=None):
        super().__init__(message)
        self.label = label


class NumericalFailureError(LoadstabError):
    """Generic numerical failure (eigensolver, integrator divergence)."""


class InvalidBracketError(LoadstabError):
    """Bisection bracket does not straddle a stability change."""
