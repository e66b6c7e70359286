"""Exception types shared across the package.

Everything raised on a statistical or data-quality failure derives from
CipwrError so that callers (the CLI, the bootstrap, the Monte Carlo driver)
can catch one base class and decide whether to abort or to record and move on.
"""

from __future__ import annotations


class CipwrError(Exception):
    """Base class for all errors raised by this package."""


class DatasetValidationError(CipwrError):
    """Raised when raw records violate the dataset contract.

    Carries ``violations``: a list of (row_index, message) pairs so callers can
    report every offending row at once instead of failing one row at a time.
    """

    def __init__(self, violations):
        self.violations = list(violations)
        lines = [f"row {idx}: {msg}" for idx, msg in self.violations]
        super().__init__("invalid dataset:\n" + "\n".join(lines))


class DesignError(CipwrError):
    """Raised for malformed design term lists (bad index, bad power)."""


class RankError(CipwrError):
    """Design matrix is rank deficient.  ``columns`` names the offenders."""

    def __init__(self, message, columns=()):
        self.columns = tuple(columns)
        super().__init__(message)


class ConvergenceError(CipwrError):
    """An iterative solver exhausted its iteration budget.

    ``last_iterate`` holds the final coefficient vector for post-mortems.
    """

    def __init__(self, message, last_iterate=None):
        self.last_iterate = last_iterate
        super().__init__(message)


class SeparationError(CipwrError):
    """Perfect or quasi-perfect separation: the MLE diverges."""


class NoEventsError(CipwrError):
    """A survival fit received data with no events at all."""


class UndefinedAtHorizonError(CipwrError):
    """A survival curve carries no information at the requested horizon."""


class EmptyCellError(CipwrError):
    """An arm (or arm-by-observed cell) required by an estimator is empty."""


class PositivityError(CipwrError):
    """An estimated selection probability is zero where a weight needs it.

    ``rows`` lists the offending subject indices.
    """

    def __init__(self, message, rows=()):
        self.rows = tuple(rows)
        super().__init__(message)


class ModeError(CipwrError):
    """A requested mode is unavailable for the given data."""


class SingularBlockError(CipwrError):
    """A matrix block of the analytic variance is numerically singular."""


class TrimDegenerateError(CipwrError):
    """Overlap trimming removed an entire arm (or everyone)."""


class BootstrapDegenerateError(CipwrError):
    """Too many bootstrap replicates failed to produce estimates."""


class MonteCarloDegenerateError(CipwrError):
    """Too many simulation replicates failed to produce estimates."""


class ConfigError(CipwrError):
    """A run configuration failed schema validation.

    ``errors`` is a list of (json_pointer, message) pairs.
    """

    def __init__(self, errors):
        self.errors = list(errors)
        lines = [f"{ptr}: {msg}" for ptr, msg in self.errors]
        super().__init__("invalid configuration:\n" + "\n".join(lines))


class NoOpWarning(UserWarning):
    """A requested model degradation changed nothing (term already absent)."""
