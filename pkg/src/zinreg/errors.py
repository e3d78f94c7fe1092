"""Exception types raised across the package."""


class ZinError(Exception):
    """Base class for all package errors."""


class DegenerateCovariate(ZinError):
    """Covariate has too few distinct values to support the requested knots."""


class InvalidEpsilon(ZinError):
    """Shrinkage magnitude must be strictly positive."""


class DimensionMismatch(ZinError):
    """Parameter, spec, and data shapes are inconsistent."""


class NonFiniteLikelihood(ZinError):
    """Log-likelihood evaluated to NaN even after probability clamping."""


class NegativeSmoothingParameter(ZinError):
    """Smoothing parameters must be nonnegative."""


class NoZeroObservations(ZinError):
    """Mixture is degenerate: the response contains no zeros."""


class NoNonzeroObservations(ZinError):
    """Mixture is degenerate: the response contains no nonzero values."""


class EliminatedTerm(ZinError):
    """Requested smooth was shrunk to exactly zero; no band is available."""


class SingleClass(ZinError):
    """AUC needs both zero and nonzero labels."""


class NoNonzeroValidation(ZinError):
    """MSE over nonzero responses needs at least one nonzero observation."""


class AllReplicationsFailed(ZinError):
    """Every MCCV replication failed for at least one candidate."""


class MissingColumn(ZinError):
    """A column referenced by the configuration is absent from the file."""


class UnparseableValue(ZinError):
    """A cell could not be parsed; carries row and column context."""

    def __init__(self, message, row=None, column=None):
        super().__init__(message)
        self.row = row
        self.column = column


class EmptyAfterFiltering(ZinError):
    """No rows remain after complete-case filtering."""


class SchemaMismatch(ZinError):
    """New data does not match the fitted model's covariate schema."""


class DomainError(ZinError):
    """Argument outside the function's domain."""


class ConfigError(ZinError):
    """Analysis configuration is malformed."""


class SingularInformationWarning(UserWarning):
    """Observed information is numerically singular; inference is degraded."""


class CollapsedKnotsWarning(UserWarning):
    """Duplicate quantile knots were collapsed, reducing the basis dimension."""
