"""Exception types raised across the package.

Every error carries a short ``kind`` string so the command line front end
can emit a single machine-parsable line.
"""


class SNMError(Exception):
    """Base class for all package errors."""

    kind = "error"


class DataError(SNMError, ValueError):
    """Malformed or internally inconsistent cohort data."""

    kind = "data_error"

    def __init__(self, message, violations=None):
        super().__init__(message)
        self.violations = list(violations or [])


class ConfigError(SNMError, ValueError):
    """Malformed configuration, regime, or scenario declaration."""

    kind = "config_error"


class SpecError(ConfigError):
    """A scenario specification that violates a simulator requirement."""

    kind = "spec_error"


class SingularFitError(SNMError, ArithmeticError):
    """Rank-deficient design in a regression fit."""

    kind = "singular_fit"

    def __init__(self, message, columns=()):
        super().__init__(message)
        self.columns = tuple(columns)


class DegenerateTestError(SNMError):
    """A score test with no contributing person-months."""

    kind = "degenerate_test"


class BracketError(SNMError):
    """No sign change of a score coordinate on the search grid."""

    kind = "bracket_error"

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace


class BranchResolutionError(SNMError, ArithmeticError):
    """No branch of a piecewise event-time map applies."""

    kind = "branch_resolution"


class UndefinedEstimateError(SNMError):
    """An estimator whose defining average is empty."""

    kind = "undefined_estimate"


class MissingArmError(SNMError):
    """A regression over actions could not be fitted for some arm."""

    kind = "missing_arm"
