"""Exceptions raised by the classifier pipeline."""


class GPCError(Exception):
    """Base class for all package errors."""


class DataError(GPCError):
    """Invalid input data."""


class ConfigError(GPCError):
    """Invalid run, sampler or prior configuration."""


class NumericalError(GPCError):
    """A numerical procedure could not produce a valid result."""


class TooFewRows(DataError):
    def __init__(self, n_rows):
        self.n_rows = n_rows
        super().__init__(f"At least 2 rows are required for standardization, got {n_rows}")


class ZeroNormRow(DataError):
    def __init__(self, row):
        self.row = row
        super().__init__(f"Row {row} has zero Euclidean norm")


class NonFinite(DataError):
    def __init__(self, location):
        self.location = location
        super().__init__(f"Non-finite entry at {location}")


class BadK(DataError):
    def __init__(self, k):
        self.k = k
        super().__init__(f"Number of folds must be at least 2, got {k}")


class RowMismatch(DataError):
    pass


class UnknownLabel(DataError):
    def __init__(self, label, known):
        self.label = label
        super().__init__(f"Unknown class label {label!r}; known classes: {list(known)}")


class ParseError(DataError):
    def __init__(self, path, line, reason):
        self.path = path
        self.line = line
        super().__init__(f"{path}:{line}: {reason}")


class EmptySet(DataError):
    pass


class EmptyTrace(DataError):
    pass


class FactorizationFailure(NumericalError):
    def __init__(self, message, jitter=None):
        self.jitter = jitter
        super().__init__(message)


class FixedPointNoConvergence(NumericalError):
    pass


class SimplexViolation(NumericalError):
    pass

