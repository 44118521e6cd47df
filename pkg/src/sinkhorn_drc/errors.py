"""Exception hierarchy shared by all modules."""

from __future__ import annotations


class SinkhornDRCError(Exception):
    """Base class for library errors."""


class ValidationError(SinkhornDRCError, ValueError):
    """Malformed input (dimensions, symmetry, signs)."""


class InfeasibleError(SinkhornDRCError):
    """The Sinkhorn ball is empty for the requested radius.

    Attributes
    ----------
    rho : float
        Requested radius.
    rho_min : float
        Smallest feasible radius for the given regularization.
    """

    def __init__(self, rho: float, rho_min: float, msg: str | None = None):
        self.rho = float(rho)
        self.rho_min = float(rho_min)
        super().__init__(msg or f"radius {rho:.6g} is below the feasibility threshold {rho_min:.6g}")


class DivergentIntegralError(SinkhornDRCError, ArithmeticError):
    """lambda * (I + eps/2 Sigma^-1) - Q is not positive definite."""


class UnboundedError(SinkhornDRCError):
    """The dual objective keeps decreasing at the search cap."""


class UnsupportedRecoveryError(SinkhornDRCError):
    """A feedback matrix cannot be recovered from a non-square state map."""


class AbsoluteContinuityError(SinkhornDRCError, ValueError):
    """A target atom is not carried by the reference measure."""


class ConvergenceError(SinkhornDRCError):
    """An iterative method exhausted its iteration budget."""

    def __init__(self, msg: str, residual: float):
        self.residual = float(residual)
        super().__init__(f"{msg} (residual {residual:.3e})")


class SolverError(SinkhornDRCError):
    """A conic backend finished with a non-optimal status."""

    def __init__(self, msg: str, report=None):
        self.report = report
        super().__init__(msg)


class OracleError(SinkhornDRCError):
    """A verification oracle could not reach its requested accuracy."""


class ConfigError(SinkhornDRCError, ValueError):
    """Invalid experiment configuration."""
