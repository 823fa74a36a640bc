"""Exception hierarchy shared across the package."""


class CountTsError(Exception):
    """Base class for all package errors."""


class SpecError(CountTsError):
    """Model specification is invalid or inconsistent with the parameters."""


class ConstraintError(CountTsError):
    """Parameter values violate the model's admissibility constraints."""


class AlignmentError(CountTsError):
    """Covariates or indicators are not aligned with the target series."""


class NumericError(CountTsError):
    """A non-finite intermediate was produced during evaluation."""


class DataError(CountTsError):
    """Input data violates a structural requirement."""


class ContiguityError(DataError):
    """Weekly series has a gap or is out of order."""


class SchemaError(DataError):
    """Input file does not match the documented column schema."""


class DomainError(CountTsError):
    """Argument outside the mathematical domain of an operation."""


class CovariateHorizonError(CountTsError):
    """Future covariate or indicator values required for forecasting are missing."""


class DiagnosticError(CountTsError):
    """A fitted model lacks the diagnostics required for this operation."""


class SearchError(CountTsError):
    """Portfolio search could not produce any usable fit."""


class ConfigError(CountTsError):
    """Run configuration failed validation."""
