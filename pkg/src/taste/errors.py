"""Exception hierarchy shared across the package."""


class TasteError(Exception):
    """Base class for all errors raised by this package."""


class DataError(TasteError):
    """Invalid dataset, factor set, or file content."""


class NnlsError(TasteError):
    """The nonnegative least squares kernel failed (bad input or ill-conditioning)."""


class SolverError(TasteError):
    """A factor update or the sweep loop failed (dimension mismatch, non-finite objective)."""


class MetricError(TasteError):
    """A metric is undefined for the given arguments (zero column, zero coupling matrix)."""
