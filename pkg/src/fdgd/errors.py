"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Operands have incompatible or invalid shapes."""


class SingularMatrixError(ValueError):
    """Linear system is singular or too ill-conditioned to solve reliably."""

    def __init__(self, message, condition=None):
        super().__init__(message)
        self.condition = condition


class StabilityError(ValueError):
    """System matrix is not Schur stable."""

    def __init__(self, message, spectral_radius=None):
        super().__init__(message)
        self.spectral_radius = spectral_radius


class ConnectivityError(ValueError):
    """Control graph is disconnected."""

    def __init__(self, message, components=None):
        super().__init__(message)
        self.components = components or []


class NotStochasticError(ValueError):
    """Matrix fails the symmetric doubly stochastic requirements."""


class ParameterError(ValueError):
    """A scalar or structural parameter is outside its admissible range."""


class DegenerateCostError(ValueError):
    """Cost has no unique minimizer (singular normal matrix or unbounded below)."""


class CertificateError(ValueError):
    """Certificate constants cannot be produced for the requested configuration."""


class DivergenceError(RuntimeError):
    """Closed-loop iterates exceeded the divergence threshold."""

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step
